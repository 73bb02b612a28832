use std::f64::consts::PI;

use instdiff_core::layout::rle_decode;
use instdiff_core::locations::{Format, LocationConfig, MaskGeometry, POINT_RADIUS_FACTOR};
use instdiff_shapeworld::derive::synthesize_scribble;
use instdiff_shapeworld::palette::*;
use instdiff_shapeworld::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn circle(center: [f64; 2], r: f64) -> ShapeInstance {
    ShapeInstance {
        category: CIRCLE,
        color: Color(2),
        texture: SOLID,
        center,
        size: r,
        rotation: 0.0,
        z: 0,
    }
}

fn single(s: ShapeInstance) -> Scene {
    Scene {
        image_size: 64,
        instances: vec![s],
    }
}

#[test]
fn fixed_seed_gives_identical_scene_bytes() {
    let cfg = SceneConfig::default();
    let a = generate_scene(&mut rng(11), &cfg).unwrap();
    let b = generate_scene(&mut rng(11), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(rasterize(&a).image.data, rasterize(&b).image.data);
    assert_eq!(rasterize(&a).image.to_png().unwrap(), rasterize(&a).image.to_png().unwrap());
}

#[test]
fn max_instances_one() {
    let cfg = SceneConfig {
        max_instances: 1,
        ..SceneConfig::default()
    };
    for s in 0..50 {
        assert_eq!(generate_scene(&mut rng(s), &cfg).unwrap().instances.len(), 1);
    }
}

#[test]
fn impossible_placement_is_a_generation_error() {
    let cfg = SceneConfig {
        min_instances: 6,
        max_instances: 6,
        min_size: 14.0,
        allow_overlap: false,
        ..SceneConfig::default()
    };
    assert!(matches!(generate_scene(&mut rng(0), &cfg), Err(Error::Generation(_))));
}

#[test]
fn color_frequencies_are_uniform() {
    let cfg = SceneConfig::default();
    let mut counts = [0usize; NUM_COLORS];
    let mut total = 0;
    let mut r = rng(5);
    for _ in 0..10_000 {
        let mut one = rng(rand::Rng::random(&mut r));
        let s = generate_scene(&mut one, &cfg).unwrap();
        for i in &s.instances {
            counts[i.color.0] += 1;
            total += 1;
        }
    }
    for c in counts {
        let f = c as f64 / total as f64;
        assert!((f - 0.125).abs() < 0.02, "{counts:?}");
    }
}

#[test]
fn visibility_invariant_holds() {
    let cfg = SceneConfig::default();
    for s in 0..200 {
        let sc = generate_scene(&mut rng(s), &cfg).unwrap();
        let r = rasterize(&sc);
        for (i, inst) in sc.instances.iter().enumerate() {
            assert!(inst.size >= 6.0);
            let full = inst.raster(64).iter().filter(|&&b| b).count();
            let vis = r.visible[i].iter().filter(|&&b| b).count();
            assert!(vis as f64 >= 0.4 * full as f64);
        }
    }
}

#[test]
fn empty_scene_is_background() {
    let r = rasterize(&Scene {
        image_size: 64,
        instances: vec![],
    });
    assert!(r.image.data.chunks(3).all(|p| p == BACKGROUND));
}

#[test]
fn circle_area_matches_analytic() {
    for r in [8.0, 10.0, 12.5, 14.0] {
        let s = circle([32.0, 32.0], r);
        let n = s.raster(64).iter().filter(|&&b| b).count() as f64;
        let a = PI * r * r;
        assert!((n - a).abs() / a < 0.05, "r={r} n={n} a={a}");
    }
}

#[test]
fn centred_circle_box() {
    let sc = single(circle([32.0, 32.0], 16.0));
    let r = rasterize(&sc);
    let b = r.mask(0).unwrap().bbox();
    let px = 1.0 / 64.0;
    for (got, want) in [(b.x0, 0.25), (b.y0, 0.25), (b.x1, 0.75), (b.y1, 0.75)] {
        assert!((got - want).abs() <= px, "{b:?}");
    }
}

#[test]
fn single_red_circle_round_trips_through_oracle() {
    let sc = single(circle([30.0, 34.0], 11.0));
    let r = rasterize(&sc);
    let d = oracle_detect(&r.image);
    assert_eq!(d.len(), 1);
    assert_eq!((d[0].color, d[0].texture, d[0].category), (Color(2), SOLID, Some(CIRCLE)));
    assert_eq!(mask_iou(&d[0].mask, &r.mask(0).unwrap()), 1.0);
}

#[test]
fn blank_image_has_no_detections() {
    assert!(oracle_detect(&RgbImage::filled(64, 64, BACKGROUND)).is_empty());
}

#[test]
fn oracle_closure_on_500_disjoint_scenes() {
    let cfg = SceneConfig::disjoint();
    let mut total = MatchSummary::default();
    for i in 0..500 {
        let sc = scene_for_index(99, i, &cfg).unwrap();
        let r = rasterize(&sc);
        let m = match_detections(&oracle::ground_truth(&sc, &r).unwrap(), &oracle_detect(&r.image));
        assert_eq!(m.exact_attributes, m.truths, "scene {i}: {m:?} {sc:?}");
        total.merge(&m);
    }
    assert_eq!(total.precision(), 1.0);
    assert_eq!(total.recall(), 1.0);
    assert!(total.min_iou >= 0.95);
}

#[test]
fn every_category_and_texture_is_classified_at_every_size() {
    for cat in 0..NUM_CATEGORIES {
        for tex in 0..NUM_TEXTURES {
            for size in [8.0, 11.0, 14.0] {
                for k in 0..8 {
                    let inst = ShapeInstance {
                        category: Category(cat),
                        color: Color((cat + tex + k) % NUM_COLORS),
                        texture: Texture(tex),
                        center: [31.3 + k as f64 * 0.37, 32.6 - k as f64 * 0.21],
                        size,
                        rotation: k as f64 * 0.7,
                        z: 0,
                    };
                    let r = rasterize(&single(inst.clone()));
                    let d = oracle_detect(&r.image);
                    assert_eq!(d.len(), 1);
                    assert_eq!(d[0].category, Some(Category(cat)), "{inst:?}");
                    assert_eq!(d[0].texture, Texture(tex), "{inst:?}");
                }
            }
        }
    }
}

#[test]
fn derived_formats_are_consistent() {
    let cfg = SceneConfig::default();
    let loc = LocationConfig::default();
    for s in 0..100 {
        let sc = generate_scene(&mut rng(s), &cfg).unwrap();
        let r = rasterize(&sc);
        let layout = scene_layout(&sc, &r, &mut rng(1000 + s), &loc).unwrap();
        for (i, ic) in layout.instances.iter().enumerate() {
            let m = r.mask(i).unwrap();
            let b = m.bbox();
            for p in ic.get(Format::Scribble).unwrap().points() {
                assert!(m.contains(*p), "scribble point {p:?} off the mask");
            }
            for p in ic.get(Format::Mask).unwrap().points() {
                assert!(b.x0 <= p[0] && p[0] <= b.x1 && b.y0 <= p[1] && p[1] <= b.y1);
            }
            let bp = ic.get(Format::Box).unwrap().points();
            assert_eq!(bp, &[[b.x0, b.y0], [b.x1, b.y1]]);
            assert_eq!(ic.source_box, Some(b));
            assert_eq!(ic.caption.text(), sc.instances[i].caption());
        }
        assert_eq!(layout.caption.text(), sc.caption());
    }
}

#[test]
fn synthesized_point_stays_in_disc() {
    let sc = single(circle([20.0, 40.0], 12.0));
    let r = rasterize(&sc);
    let m = r.mask(0).unwrap();
    let b = m.bbox();
    let radius = POINT_RADIUS_FACTOR * b.width().min(b.height());
    let c = b.center();
    let mut g = rng(3);
    for _ in 0..1000 {
        let ic = derive_location_formats(&m, "red solid circle", &mut g, &LocationConfig::default()).unwrap();
        let p = ic.get(Format::Point).unwrap().points()[0];
        assert!(((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() <= radius + 1e-12);
    }
}

#[test]
fn scribble_on_tiny_mask() {
    let mut bits = vec![false; 64];
    bits[9] = true;
    bits[10] = true;
    let m = MaskGeometry::new(8, 8, bits).unwrap();
    let s = synthesize_scribble(&m, 8, &mut rng(0)).unwrap();
    assert!(s.points().iter().all(|p| m.contains(*p)));
}

#[test]
fn layout_spec_round_trips() {
    let loc = LocationConfig::default();
    let sc = generate_scene(&mut rng(4), &SceneConfig::default()).unwrap();
    let r = rasterize(&sc);
    let layout = scene_layout(&sc, &r, &mut rng(5), &loc).unwrap();
    let spec = layout_spec(&layout);
    let back = instdiff_core::layout::LayoutSpec::from_json(&spec.to_json()).unwrap();
    assert_eq!(back, spec);
    for (i, is) in spec.instances.iter().enumerate() {
        assert_eq!(rle_decode(is.mask_rle.as_ref().unwrap()).unwrap(), r.mask(i).unwrap());
    }
    back.validate(&loc).unwrap();
}

#[test]
fn png_and_tensor_round_trip() {
    let sc = generate_scene(&mut rng(8), &SceneConfig::default()).unwrap();
    let img = rasterize(&sc).image;
    assert_eq!(RgbImage::from_png(&img.to_png().unwrap()).unwrap(), img);
    let t = img.to_tensor::<f32>();
    assert_eq!(t.shape(), &[3, 64, 64]);
    assert_eq!(RgbImage::from_tensor(&t).unwrap(), img);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generation_is_pure_in_seed_and_index(seed in any::<u64>(), index in 0u64..1000) {
        let cfg = SceneConfig::default();
        prop_assert_eq!(scene_for_index(seed, index, &cfg).unwrap(), scene_for_index(seed, index, &cfg).unwrap());
    }

    #[test]
    fn visible_masks_partition_painted_pixels(seed in any::<u64>()) {
        let sc = generate_scene(&mut rng(seed), &SceneConfig::default()).unwrap();
        let r = rasterize(&sc);
        for p in 0..64 * 64 {
            let owners = r.visible.iter().filter(|v| v[p]).count();
            let painted = r.image.data[3 * p..3 * p + 3] != BACKGROUND;
            prop_assert_eq!(owners, painted as usize);
        }
    }
}
