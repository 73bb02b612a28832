mod common;

use common::*;
use instdiff_core::layout::{InstanceCondition, SceneLayout};
use instdiff_core::locations::{points_from_mask, MaskGeometry};
use instdiff_core::model::{build_unet, NoiseSchedule, ScheduleConfig, UNetConfig};
use instdiff_core::nn::ModelWeights;
use instdiff_core::sampler::*;
use instdiff_core::{Error, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

struct Fixture {
    cfg: UNetConfig,
    w: ModelWeights<f32>,
    sched: NoiseSchedule,
}

fn fixture() -> Fixture {
    let cfg = micro_cfg();
    let mut w = build_unet::<f32>(&cfg, 21).unwrap();
    // Open the gates so instance tokens actually reach the output.
    let gates: Vec<String> = w.names().filter(|n| n.ends_with(".uf.gate")).cloned().collect();
    for g in gates {
        w.set(&g, Tensor::full(&[1], 0.6)).unwrap();
    }
    Fixture {
        cfg,
        w,
        sched: NoiseSchedule::new(&ScheduleConfig::default()).unwrap(),
    }
}

fn req(layout: SceneLayout, steps: usize, mis_fraction: f64, mode: MisMode) -> SampleRequest {
    SampleRequest {
        layout,
        opts: SampleOptions {
            steps,
            mis_fraction,
            mis_mode: mode,
            seed: 77,
            debug_checksums: true,
            ..SampleOptions::default()
        },
    }
}

fn layout() -> SceneLayout {
    scene(vec![
        boxed("a red circle", [0.0, 0.0, 0.5, 0.5]),
        boxed("a blue star", [0.5, 0.5, 1.0, 1.0]),
    ])
}

#[test]
fn sampling_is_reproducible() {
    let f = fixture();
    let s = Sampler::new(&f.w, &f.cfg, &f.sched);
    let r = req(layout(), 4, 0.0, MisMode::Off);
    let a = s.sample(&r).unwrap();
    let b = s.sample(&r).unwrap();
    assert_eq!(a.rgb, b.rgb);
    assert_eq!(a.checksums, b.checksums);
    assert_eq!(a.checksums.len(), 4);
    assert_eq!((a.width, a.height, a.rgb.len()), (8, 8, 8 * 8 * 3));
    let one = s.sample(&req(layout(), 1, 0.0, MisMode::Off)).unwrap();
    assert!(one.latent.is_finite());
}

#[test]
fn empty_layout_equals_nulled_layout() {
    let f = fixture();
    let s = Sampler::new(&f.w, &f.cfg, &f.sched);
    let empty = s.sample(&req(scene(vec![]), 3, 0.0, MisMode::Off)).unwrap();
    let nulled = s.sample(&req(layout().nulled(), 3, 0.0, MisMode::Off)).unwrap();
    assert!(empty.latent.max_abs_diff(&nulled.latent) <= 1e-6);
    let cond = s.sample(&req(layout(), 3, 0.0, MisMode::Off)).unwrap();
    assert!(cond.latent.max_abs_diff(&empty.latent) > 0.0);
}

#[test]
fn zero_fraction_mis_is_vanilla() {
    let f = fixture();
    let s = Sampler::new(&f.w, &f.cfg, &f.sched);
    let base = s.sample(&req(layout(), 5, 0.0, MisMode::Off)).unwrap();
    for mode in [MisMode::Average, MisMode::CropPaste] {
        let m = s.generate(&req(layout(), 5, 0.0, mode)).unwrap();
        assert_eq!(m.latent, base.latent);
        assert_eq!(m.rgb, base.rgb);
    }
    // 0.09 * 5 rounds to zero as well.
    assert_eq!(s.multi_instance_sample(&req(layout(), 5, 0.09, MisMode::Average)).unwrap().latent, base.latent);
}

#[test]
fn single_instance_average_is_midpoint() {
    let f = fixture();
    let s = Sampler::new(&f.w, &f.cfg, &f.sched);
    let one = scene(vec![boxed("a red circle", [0.1, 0.2, 0.7, 0.9])]);
    let r = req(one.clone(), 5, 0.4, MisMode::Average);
    let z = initial_noise::<f32>(&f.cfg, 77);
    let (global, merged) = s.merged_latent(&r, z.clone(), MisMode::Average).unwrap();
    let solo = SampleRequest { layout: one.only(0), opts: r.opts.clone() };
    let (inst, _) = s.merged_latent(&solo, z, MisMode::Off).unwrap();
    let want = average_latents(&[inst], &global).unwrap();
    assert_eq!(merged, want);
    let full = s.multi_instance_sample(&r).unwrap();
    assert!(full.latent.is_finite());
}

#[test]
fn crop_paste_geometry() {
    let f = fixture();
    let s = Sampler::new(&f.w, &f.cfg, &f.sched);
    let z = initial_noise::<f32>(&f.cfg, 77);

    // Full-frame box: the global latent is replaced by the instance latent.
    let full = scene(vec![boxed("a red circle", [0.0, 0.0, 1.0, 1.0])]);
    let r = req(full.clone(), 5, 0.4, MisMode::CropPaste);
    let (_, merged) = s.merged_latent(&r, z.clone(), MisMode::CropPaste).unwrap();
    let (inst, _) = s
        .merged_latent(&SampleRequest { layout: full.only(0), opts: r.opts.clone() }, z.clone(), MisMode::Off)
        .unwrap();
    assert_eq!(merged, inst);

    // Disjoint boxes: outside both, the merged latent is the global one.
    let l = scene(vec![
        boxed("a red circle", [0.0, 0.0, 0.25, 0.5]),
        boxed("a blue star", [0.5, 0.5, 0.75, 1.0]),
    ]);
    let r = req(l.clone(), 5, 0.4, MisMode::CropPaste);
    let (global, merged) = s.merged_latent(&r, z, MisMode::CropPaste).unwrap();
    let mut inside = 0;
    for y in 0..8 {
        for x in 0..8 {
            let p = [(x as f64 + 0.5) / 8.0, (y as f64 + 0.5) / 8.0];
            let in_any = l.instances.iter().any(|i| paste_region(i).unwrap().contains(p));
            for c in 0..3 {
                let k = c * 64 + y * 8 + x;
                if in_any {
                    inside += 1;
                } else {
                    assert_eq!(merged.data()[k], global.data()[k]);
                }
            }
        }
    }
    assert_eq!(inside, 3 * (2 * 4 + 2 * 4));
    assert!(merged.max_abs_diff(&global) > 0.0);
}

#[test]
fn crop_paste_respects_masks_and_order() {
    let bits: Vec<bool> = (0..64).map(|i| i % 8 < 4).collect();
    let m = MaskGeometry::new(8, 8, bits).unwrap();
    let ps = points_from_mask(&m, 4, &mut rng(1)).unwrap();
    let inst = InstanceCondition::new(caption("a red circle")).with_mask(m, ps);
    let region = paste_region(&inst).unwrap();
    let mut g = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
    let a = Tensor::<f64>::full(&[1, 1, 8, 8], 1.0);
    paste_latent(&mut g, &a, &region).unwrap();
    assert_eq!(g.data().iter().filter(|v| **v == 1.0).count(), 32);
    assert!((0..64).all(|i| (g.data()[i] == 1.0) == (i % 8 < 4)));
    // Later instance wins on overlap.
    let b = Tensor::<f64>::full(&[1, 1, 8, 8], 2.0);
    let bx = paste_region(&boxed("a star", [0.0, 0.0, 1.0, 0.5])).unwrap();
    paste_latent(&mut g, &b, &bx).unwrap();
    assert_eq!(g.data()[0], 2.0);
    assert_eq!(g.data()[63], 0.0);
}

#[test]
fn crop_paste_rejects_point_only() {
    let f = fixture();
    let s = Sampler::new(&f.w, &f.cfg, &f.sched);
    let l = scene(vec![pointed("a red circle", [0.5, 0.5])]);
    let e = s.crop_and_paste_sample(&req(l, 5, 0.4, MisMode::CropPaste));
    assert!(matches!(e, Err(Error::UnsupportedFormat(_))));
}

#[test]
fn average_latents_properties() {
    let x = rand_tensor(&[2, 5], 1);
    assert_eq!(average_latents(&[x.clone(), x.clone()], &x).unwrap(), x);
    let neg = x.map(|v| -v);
    let z = Tensor::zeros(&[2, 5]);
    assert_eq!(average_latents(&[x.clone(), neg], &z).unwrap(), z);
    assert!(matches!(average_latents::<f64>(&[], &z), Err(Error::Contract(_))));

    let mut r = rng(4);
    let n = 20_000;
    for k in [1usize, 3, 7] {
        let draw = |r: &mut rand_chacha::ChaCha8Rng| Tensor::<f64>::from_fn(&[n], |_| r.sample(StandardNormal));
        let parts: Vec<Tensor<f64>> = (0..k).map(|_| draw(&mut r)).collect();
        let g = draw(&mut r);
        let m = average_latents(&parts, &g).unwrap();
        let var = m.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        let want = 1.0 / (k + 1) as f64;
        assert!((var / want - 1.0).abs() < 0.05, "k={k}: {var} vs {want}");
    }
}

#[test]
fn decode_maps_range() {
    let z = Tensor::<f32>::new(&[1, 3, 1, 2], vec![-1.0, 1.0, 0.0, 2.0, -3.0, 0.5]).unwrap();
    let (rgb, w, h) = decode(&z).unwrap();
    assert_eq!((w, h), (2, 1));
    assert_eq!(rgb, vec![0, 128, 0, 255, 255, 191]);
}

#[test]
fn options_validate() {
    let f = fixture();
    let mut o = SampleOptions::default();
    assert_eq!(o.steps, 50);
    assert_eq!(o.mis_fraction, 0.36);
    assert_eq!(o.guidance_scale, 3.0);
    assert_eq!(o.mis_steps(), 18);
    o.steps = 0;
    assert!(o.validate(&f.sched).is_err());
    o.steps = 10;
    o.mis_fraction = 1.5;
    assert!(o.validate(&f.sched).is_err());
}
