#![allow(dead_code)]

use instdiff_core::conditioning::ConditioningConfig;
use instdiff_core::layout::{vocabulary, CaptionTokens, InstanceCondition, SceneLayout};
use instdiff_core::locations::*;
use instdiff_core::model::UNetConfig;
use instdiff_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// 8x8 two-level UNet small enough for exhaustive tests.
pub fn micro_cfg() -> UNetConfig {
    UNetConfig {
        image_size: 8,
        in_channels: 3,
        widths: vec![8, 16],
        res_blocks: 1,
        groups: 2,
        time_dim: 8,
        site_resolutions: vec![8, 4],
        conditioning: ConditioningConfig {
            text_dim: 8,
            token_dim: 8,
            tokenizer_hidden: 8,
            heads: 2,
            format_aware: true,
            masked_attention: true,
            location: LocationConfig {
                bandwidth: 2,
                scribble_points: 3,
                mask_points: 4,
            },
        },
        ..UNetConfig::default()
    }
}

pub fn caption(s: &str) -> CaptionTokens {
    CaptionTokens::parse(s).unwrap()
}

pub fn boxed(s: &str, b: [f64; 4]) -> InstanceCondition {
    let g = BoxGeometry::new(b[0], b[1], b[2], b[3]).unwrap();
    InstanceCondition::new(caption(s)).with(points_from_box(&g).unwrap())
}

pub fn pointed(s: &str, p: [f64; 2]) -> InstanceCondition {
    InstanceCondition::new(caption(s)).with(point_set(p).unwrap())
}

pub fn scene(instances: Vec<InstanceCondition>) -> SceneLayout {
    SceneLayout::new(caption("a scene with shapes"), instances)
}

fn random_caption<R: Rng>(r: &mut R) -> CaptionTokens {
    let v = vocabulary();
    let n = r.random_range(1..=4);
    let words: Vec<&str> = (0..n).map(|_| v[r.random_range(0..v.len())]).collect();
    caption(&words.join(" "))
}

/// Random instance with a random non-empty subset of formats.
pub fn random_instance<R: Rng>(r: &mut R, loc: &LocationConfig) -> InstanceCondition {
    let x0 = r.random_range(0.0..0.7);
    let y0 = r.random_range(0.0..0.7);
    let b = BoxGeometry::new(x0, y0, x0 + r.random_range(0.1..0.3), y0 + r.random_range(0.1..0.3)).unwrap();
    let mut inst = InstanceCondition::new(random_caption(r));
    loop {
        for f in Format::ALL {
            if !r.random_bool(0.5) {
                continue;
            }
            inst = match f {
                Format::Point => inst.with(synthesize_point(&b, r).unwrap()),
                Format::Box => inst.with(points_from_box(&b).unwrap()),
                Format::Scribble => {
                    let poly = [[b.x0, b.y0], b.center(), [b.x1, b.y1]];
                    inst.with(points_from_scribble(&poly, loc.scribble_points).unwrap())
                }
                Format::Mask => {
                    let n = 16;
                    let bits = (0..n * n)
                        .map(|i| b.contains([((i % n) as f64 + 0.5) / n as f64, ((i / n) as f64 + 0.5) / n as f64]))
                        .collect();
                    let m = MaskGeometry::new(n, n, bits).unwrap();
                    let ps = points_from_mask(&m, loc.mask_points, r).unwrap();
                    inst.with_mask(m, ps)
                }
            };
        }
        if inst.any_present() {
            break;
        }
    }
    inst.source_box = Some(b);
    inst
}

pub fn random_layout<R: Rng>(r: &mut R, loc: &LocationConfig, max_n: usize) -> SceneLayout {
    let n = r.random_range(0..=max_n);
    let inst = (0..n).map(|_| random_instance(r, loc)).collect();
    SceneLayout::new(random_caption(r), inst)
}
