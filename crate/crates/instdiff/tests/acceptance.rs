//! Acceptance suite: one line per criterion.
//!
//! Criteria that need a fully trained model are checked only when their
//! artifacts are supplied:
//!   INSTDIFF_ACCEPT_CKPT + INSTDIFF_ACCEPT_DATA  trained checkpoint and dataset dir
//!   INSTDIFF_ACCEPT_ABLATION                     JSON written by `instdiff ablate --json`
//! Without them those lines read NOT VERIFIED. Only failures of the
//! criteria checked here in full make the process exit non-zero.

mod common;

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use instdiff::eval::{check_gates, upper_bound, Variant};
use instdiff::pipeline::{checkpoint_meta, read_dataset, test_items, write_dataset, Ablation, AblationRow, LoadedModel, Split};
use instdiff::service::{router, AppState};
use instdiff::store::SessionStore;
use instdiff::RunConfig;
use instdiff_core::conditioning::{batch_mask, build_instance_id_map, build_unifusion, unifusion_forward, ConditioningConfig};
use instdiff_core::layout::{vocabulary, CaptionTokens, InstanceCondition, SceneLayout};
use instdiff_core::locations::*;
use instdiff_core::model::{build_unet, unet_forward, Checkpoint, NoiseSchedule, ScheduleConfig, UNetConfig};
use instdiff_core::nn::{Builder, Ctx, ModelWeights};
use instdiff_core::sampler::{initial_noise, paste_region, MisMode, SampleOptions, SampleRequest, Sampler};
use instdiff_core::scaleu::{build_scaleu, lowpass_bins, scaleu_forward, ScaleUConfig};
use instdiff_core::tensor::{fft2, grad_check, grad_check_sampled, ifft2};
use instdiff_core::{Tape, Tensor};
use instdiff_shapeworld::{match_detections, oracle_detect, rasterize, scene_for_index, MatchSummary, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

type Check = Result<String, String>;

enum Status {
    Pass(String),
    Fail(String),
    NotVerified(String),
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn micro_cfg() -> UNetConfig {
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

fn caption(s: &str) -> CaptionTokens {
    CaptionTokens::parse(s).unwrap()
}

fn boxed(s: &str, b: [f64; 4]) -> InstanceCondition {
    let g = BoxGeometry::new(b[0], b[1], b[2], b[3]).unwrap();
    InstanceCondition::new(caption(s)).with(points_from_box(&g).unwrap())
}

fn pointed(s: &str, p: [f64; 2]) -> InstanceCondition {
    InstanceCondition::new(caption(s)).with(point_set(p).unwrap())
}

fn scene(instances: Vec<InstanceCondition>) -> SceneLayout {
    SceneLayout::new(caption("a scene with shapes"), instances)
}

/// Random instance carrying a random non-empty subset of the formats.
fn random_instance(r: &mut ChaCha8Rng, loc: &LocationConfig) -> InstanceCondition {
    let x0 = r.random_range(0.0..0.7);
    let y0 = r.random_range(0.0..0.7);
    let b = BoxGeometry::new(x0, y0, x0 + r.random_range(0.1..0.3), y0 + r.random_range(0.1..0.3)).unwrap();
    let v = vocabulary();
    let words: Vec<&str> = (0..r.random_range(1..=4)).map(|_| v[r.random_range(0..v.len())]).collect();
    let mut inst = InstanceCondition::new(caption(&words.join(" ")));
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

// Autodiff

fn op_checks() -> Vec<(&'static str, f64)> {
    let gc = |f: &dyn Fn(&mut Tape<f64>, &[instdiff_core::tensor::Var]) -> instdiff_core::Result<instdiff_core::tensor::Var>,
              inputs: &[Tensor<f64>]| grad_check(f, inputs, 1e-5).map(|r| r.max_rel_err).unwrap_or(f64::INFINITY);
    let mut out = Vec::new();
    out.push((
        "matmul",
        gc(
            &|t, v| {
                let c = t.matmul(v[0], v[1])?;
                let s = t.square(c);
                Ok(t.sum(s))
            },
            &[rand_tensor(&[3, 4], 1), rand_tensor(&[4, 2], 2)],
        ),
    ));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
        out.push((
            "bmm",
            gc(
                &|t, v| {
                    let c = t.bmm(v[0], v[1], ta, tb)?;
                    let s = t.tanh(c);
                    Ok(t.sum(s))
                },
                &[rand_tensor(&sa, 3), rand_tensor(&sb, 4)],
            ),
        ));
    }
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 4), (1, 0, 1), (2, 0, 2)] {
        out.push((
            "conv2d",
            gc(
                &|t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                    let s = t.square(y);
                    Ok(t.sum(s))
                },
                &[rand_tensor(&[2, 2, 4, 4], 5), rand_tensor(&[3, 2, k, k], 6), rand_tensor(&[3], 7)],
            ),
        ));
    }
    let wgn = rand_tensor(&[2, 4, 3, 3], 99);
    out.push((
        "group_norm",
        gc(
            &|t, v| {
                let y = t.group_norm(v[0], 2, v[1], v[2], 1e-5)?;
                let w = t.constant(wgn.clone());
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            },
            &[rand_tensor(&[2, 4, 3, 3], 8), rand_tensor(&[4], 9), rand_tensor(&[4], 10)],
        ),
    ));
    out.push((
        "elementwise",
        gc(
            &|t, v| {
                let a = t.add(v[0], v[1])?;
                let a = t.silu(a);
                let m = t.mul(a, v[1])?;
                let m = t.mul_channel(m, v[2])?;
                let m = t.add_channel(m, v[3])?;
                let m = t.tanh(m);
                let m = t.mul(m, v[4])?;
                let m = t.sub(m, v[0])?;
                let m = t.scale(m, 0.7);
                let m = t.offset(m, 0.2);
                let q = t.square(m);
                Ok(t.mean(q))
            },
            &[
                rand_tensor(&[2, 3, 2, 2], 11),
                rand_tensor(&[2, 3, 2, 2], 12),
                rand_tensor(&[3], 13),
                rand_tensor(&[2, 3], 14),
                rand_tensor(&[1], 15),
            ],
        ),
    ));
    out.push((
        "token layout",
        gc(
            &|t, v| {
                let tok = t.to_tokens(v[0])?;
                let tok = t.add_bias(tok, v[1])?;
                let extra = t.concat_rows(tok, v[2])?;
                let back = t.from_tokens(tok, 2, 2)?;
                let cat = t.concat_channels(back, v[0])?;
                let up = t.upsample2x(cat)?;
                let r = t.reshape(up, &[2, 96])?;
                let s1 = t.square(r);
                let s2 = t.tanh(extra);
                let a = t.sum(s1);
                let b = t.sum(s2);
                t.add(a, b)
            },
            &[rand_tensor(&[2, 3, 2, 2], 16), rand_tensor(&[3], 17), rand_tensor(&[2, 2, 3], 18)],
        ),
    ));
    let mask = Tensor::from_fn(&[2, 3, 4], |i| if i % 3 == 1 { f64::NEG_INFINITY } else { 0.0 });
    out.push((
        "masked_softmax",
        gc(
            &|t, v| {
                let logits = t.bmm(v[0], v[1], false, true)?;
                let p = t.masked_softmax(logits, Some(&mask))?;
                let o = t.bmm(p, v[1], false, false)?;
                let s = t.square(o);
                Ok(t.sum(s))
            },
            &[rand_tensor(&[2, 3, 5], 19), rand_tensor(&[2, 4, 5], 20)],
        ),
    ));
    out.push((
        "embed_bag/blend_rows",
        gc(
            &|t, v| {
                let e = t.embed_bag(v[0], &[vec![0, 2], vec![1], vec![2, 2, 3]])?;
                let b = t.blend_rows(e, v[1], &[1.0, 0.0, 1.0])?;
                let s = t.square(b);
                Ok(t.sum(s))
            },
            &[rand_tensor(&[4, 3], 22), rand_tensor(&[3], 23)],
        ),
    ));
    out.push((
        "gather_rows",
        gc(
            &|t, v| {
                let g = t.gather_rows(v[0], &[Some(2), None, Some(0), Some(2)])?;
                let s = t.square(g);
                Ok(t.sum(s))
            },
            &[rand_tensor(&[3, 4], 24)],
        ),
    ));
    let lowpass: Vec<bool> = (0..16).map(|i| i % 5 == 0).collect();
    let wsp = rand_tensor(&[2, 3, 4, 4], 24);
    out.push((
        "spectral_scale",
        gc(
            &|t, v| {
                let y = t.spectral_scale(v[0], v[1], &lowpass)?;
                let w = t.constant(wsp.clone());
                let p = t.mul(y, w)?;
                let q = t.square(p);
                Ok(t.sum(q))
            },
            &[rand_tensor(&[2, 3, 4, 4], 25), rand_tensor(&[3], 26)],
        ),
    ));
    out
}

fn micro_unet_grad_err() -> Result<f64, String> {
    let cfg = micro_cfg();
    let mut w = build_unet::<f64>(&cfg, 5).map_err(e2s)?;
    let names: Vec<String> = w.names().cloned().collect();
    let mut r = rng(11);
    // Open gates and non-zero ScaleU so every path carries gradient.
    for n in &names {
        if n.ends_with(".uf.gate") || n.contains(".scaleu.") {
            let shape = w.get(n).unwrap().shape().to_vec();
            w.set(n, Tensor::from_fn(&shape, |_| r.random_range(-0.6..0.6))).map_err(e2s)?;
        }
    }
    let probe = [
        "conv_in.w",
        "enc.0.0.conv1.w",
        "enc.1.site.uf.gate",
        "enc.0.site.uf.q1.w",
        "dec.0.0.scaleu.ss",
        "dec.1.0.scaleu.sb",
        "tok.box.loc",
        "tok.point.null",
        "text.embed",
        "time.l1.w",
        "out.conv.w",
    ];
    let l = scene(vec![
        boxed("a red striped circle", [0.1, 0.1, 0.6, 0.5]),
        pointed("a blue star", [0.75, 0.8]),
    ]);
    let target = rand_tensor(&[1, 3, 8, 8], 13);
    let mut inputs = vec![rand_tensor(&[1, 3, 8, 8], 12)];
    inputs.extend(probe.iter().map(|n| w.get(n).unwrap().clone()));
    let report = grad_check_sampled(
        |tape, vars| {
            let mut ctx = Ctx::new(tape, &w, false);
            for (n, v) in probe.iter().zip(&vars[1..]) {
                ctx.bind(n, *v)?;
            }
            let y = unet_forward(&mut ctx, &cfg, vars[0], &[400], &[&l])?;
            let t = ctx.tape.constant(target.clone());
            let d = ctx.tape.sub(y, t)?;
            let s = ctx.tape.square(d);
            Ok(ctx.tape.mean(s))
        },
        &inputs,
        1e-5,
        12,
    )
    .map_err(e2s)?;
    Ok(report.max_rel_err)
}

fn autodiff() -> Check {
    let started = Instant::now();
    let ops = op_checks();
    let (worst_op, worst) = ops.iter().fold(("", 0.0f64), |a, &(n, e)| if e > a.1 { (n, e) } else { a });
    ensure(worst < 1e-4, || format!("{worst_op} rel err {worst:.2e} >= 1e-4"))?;
    let unet = micro_unet_grad_err()?;
    ensure(unet < 1e-3, || format!("micro-UNet rel err {unet:.2e} >= 1e-3"))?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} op checks max rel err {worst:.1e} ({worst_op}, < 1e-4); micro-UNet {unet:.1e} (< 1e-3); {secs:.1} s (< 120 s)",
        ops.len()
    ))
}

// FFT and ScaleU

/// Direct O(N^4) DFT low-band scaling of one channel.
fn naive_skip(x: &[f64], n: usize, r_thresh: usize, alpha: f64) -> Vec<f64> {
    let lp = lowpass_bins(n, n, r_thresh);
    let mut spec = vec![(0.0, 0.0); n * n];
    for ky in 0..n {
        for kx in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..n {
                for xx in 0..n {
                    let a = -2.0 * PI * ((ky * y) as f64 / n as f64 + (kx * xx) as f64 / n as f64);
                    re += x[y * n + xx] * a.cos();
                    im += x[y * n + xx] * a.sin();
                }
            }
            let s = if lp[ky * n + kx] { alpha } else { 1.0 };
            spec[ky * n + kx] = (re * s, im * s);
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for xx in 0..n {
            let mut acc = 0.0;
            for ky in 0..n {
                for kx in 0..n {
                    let a = 2.0 * PI * ((ky * y) as f64 / n as f64 + (kx * xx) as f64 / n as f64);
                    let (re, im) = spec[ky * n + kx];
                    acc += re * a.cos() - im * a.sin();
                }
            }
            out[y * n + xx] = acc / (n * n) as f64;
        }
    }
    out
}

fn scaleu_skip_err(c: usize, n: usize, r: usize) -> Result<f64, String> {
    let ss: Vec<f64> = (0..c).map(|i| 0.7 - 0.5 * i as f64).collect();
    let mut rr = rng(0);
    let mut b = Builder::new(&mut rr);
    build_scaleu(&mut b, "s", c, c).map_err(e2s)?;
    let mut w: ModelWeights<f64> = b.finish();
    w.set("s.sb", Tensor::zeros(&[c])).map_err(e2s)?;
    w.set("s.ss", Tensor::new(&[c], ss.clone()).map_err(e2s)?).map_err(e2s)?;
    let cfg = ScaleUConfig {
        r_thresh: Some(r),
        ..ScaleUConfig::default()
    };
    let fs = rand_tensor(&[1, c, n, n], 4 + n as u64);
    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, &w, false);
    let a = ctx.tape.constant(fs.clone());
    let (_, y) = scaleu_forward(&mut ctx, "s", a, a, &cfg).map_err(e2s)?;
    let got = ctx.tape.value(y).clone();
    let mut worst = 0.0f64;
    for ch in 0..c {
        let want = naive_skip(&fs.data()[ch * n * n..(ch + 1) * n * n], n, r, ss[ch].tanh() + 1.0);
        for (a, b) in got.data()[ch * n * n..(ch + 1) * n * n].iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn fft() -> Check {
    let sizes = [1usize, 2, 4, 8, 16, 32, 64];
    let (mut round, mut parse) = (0.0f64, 0.0f64);
    for &h in &sizes {
        for &w in &sizes {
            let x = rand_tensor(&[h, w], (h * 100 + w) as u64);
            let f = fft2(&x).map_err(e2s)?;
            round = round.max(ifft2(&f).map_err(e2s)?.max_abs_diff(&x));
            let time: f64 = x.data().iter().map(|v| v * v).sum();
            let freq: f64 = f.re().iter().zip(f.im()).map(|(a, b)| a * a + b * b).sum::<f64>() / (h * w) as f64;
            parse = parse.max((time - freq).abs() / time.max(1.0));
        }
    }
    ensure(round < 1e-6, || format!("roundtrip err {round:.2e}"))?;
    ensure(parse <= 1e-5, || format!("Parseval rel err {parse:.2e}"))?;
    let mut skip = 0.0f64;
    for (n, r) in [(4, 1), (8, 2), (16, 4)] {
        skip = skip.max(scaleu_skip_err(2, n, r)?);
    }
    ensure(skip < 1e-5, || format!("ScaleU skip vs naive DFT {skip:.2e}"))?;
    Ok(format!(
        "{} size pairs roundtrip {round:.1e} (< 1e-6), Parseval {parse:.1e} (<= 1e-5); ScaleU vs naive DFT {skip:.1e} (< 1e-5)",
        sizes.len() * sizes.len()
    ))
}

// Identity at init

fn forward(w: &ModelWeights<f64>, cfg: &UNetConfig, z: &Tensor<f64>, t: usize, l: &SceneLayout) -> Result<Tensor<f64>, String> {
    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, w, false);
    let zv = ctx.tape.constant(z.clone());
    let y = unet_forward(&mut ctx, cfg, zv, &[t], &[l]).map_err(e2s)?;
    Ok(ctx.tape.value(y).clone())
}

fn identity_at_init() -> Check {
    let mut worst = 0.0f64;
    let mut bit_identical = true;
    let mut r = rng(31);
    for (name, cfg) in [("micro", micro_cfg()), ("default", UNetConfig::default())] {
        let w = build_unet::<f64>(&cfg, 17).map_err(e2s)?;
        let gates_zero = w.iter().filter(|(k, _)| k.ends_with(".gate")).all(|(_, v)| v.max_abs() == 0.0);
        let scaleu_zero = w.iter().filter(|(k, _)| k.contains(".scaleu.")).all(|(_, v)| v.max_abs() == 0.0);
        ensure(gates_zero && scaleu_zero, || format!("{name}: gates or ScaleU vectors not zero at init"))?;
        let n = cfg.image_size;
        let trials = if name == "micro" { 10 } else { 2 };
        for k in 0..trials {
            let l = scene((0..r.random_range(1..=4)).map(|_| random_instance(&mut r, &cfg.conditioning.location)).collect());
            let z = rand_tensor(&[1, cfg.in_channels, n, n], 40 + k);
            let t = r.random_range(0..1000);
            let cond = forward(&w, &cfg, &z, t, &l)?;
            for uncond in [l.nulled(), scene(vec![])] {
                let u = forward(&w, &cfg, &z, t, &uncond)?;
                worst = worst.max(cond.max_abs_diff(&u));
                bit_identical &= cond == u;
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max abs diff {worst:.2e}"))?;
    Ok(format!(
        "conditioned vs nulled/empty max abs diff {worst:.1e} (<= 1e-6), bit-identical: {bit_identical}"
    ))
}

// No leakage

fn no_leakage() -> Check {
    let loc = LocationConfig::default();
    let mut r = rng(11);
    let (h, w, c, d, k, heads) = (4, 4, 8, 6, 4, 2);
    let mut rr = rng(3);
    let mut b = Builder::new(&mut rr);
    build_unifusion(&mut b, "uf", c, d, heads).map_err(e2s)?;
    let mut weights: ModelWeights<f64> = b.finish();
    weights.set("uf.gate", Tensor::full(&[1], 0.8)).map_err(e2s)?;
    let fuse = |v: &Tensor<f64>, g: &Tensor<f64>, mask: Option<&Tensor<f64>>| -> Result<Tensor<f64>, String> {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &weights, false);
        let vv = ctx.tape.constant(v.clone());
        let gv = ctx.tape.constant(g.clone());
        let o = unifusion_forward(&mut ctx, "uf", vv, vv, Some(gv), mask, heads).map_err(e2s)?;
        Ok(ctx.tape.value(o).clone())
    };
    let (mut checked, mut members) = (0, 0);
    while checked < 100 {
        let n = r.random_range(1..=4);
        let l = scene((0..n).map(|_| random_instance(&mut r, &loc)).collect());
        let idm = build_instance_id_map(&l, h, w);
        let mask = batch_mask::<f64>(&[&l], h, w, n, k, true).map_err(e2s)?;
        let v = rand_tensor(&[1, h * w, c], r.random());
        let g = rand_tensor(&[1, k * n, d], r.random());
        let base = fuse(&v, &g, mask.as_ref())?;
        let i = r.random_range(0..n);
        let mut g2 = g.clone();
        for f in 0..k {
            for j in 0..d {
                g2.data_mut()[(f * n + i) * d + j] += 1.0;
            }
        }
        let pert = fuse(&v, &g2, mask.as_ref())?;
        for t in 0..h * w {
            let diff = (0..c).map(|j| (base.data()[t * c + j] - pert.data()[t * c + j]).abs()).fold(0.0, f64::max);
            if idm.sets[t].contains(&(i + 1)) {
                members += 1;
                ensure(diff > 0.0, || format!("layout {checked}: member token {t} unaffected"))?;
            } else {
                ensure(diff == 0.0, || format!("layout {checked}: leak of {diff:e} into token {t} from instance {i}"))?;
            }
        }
        checked += 1;
    }
    Ok(format!("{checked} random layouts, exact zero outside membership, {members} member tokens changed"))
}

// Sampler degeneracy

fn sampler_degeneracy() -> Check {
    let cfg = micro_cfg();
    let mut w = build_unet::<f32>(&cfg, 21).map_err(e2s)?;
    let gates: Vec<String> = w.names().filter(|n| n.ends_with(".uf.gate")).cloned().collect();
    for g in gates {
        w.set(&g, Tensor::full(&[1], 0.6)).map_err(e2s)?;
    }
    let sched = NoiseSchedule::new(&ScheduleConfig::default()).map_err(e2s)?;
    let s = Sampler::new(&w, &cfg, &sched);
    let req = |layout: SceneLayout, frac: f64, mode: MisMode| SampleRequest {
        layout,
        opts: SampleOptions {
            steps: 5,
            mis_fraction: frac,
            mis_mode: mode,
            seed: 77,
            ..SampleOptions::default()
        },
    };
    let l = scene(vec![
        boxed("a red circle", [0.0, 0.0, 0.5, 0.5]),
        boxed("a blue star", [0.5, 0.5, 1.0, 1.0]),
    ]);
    let base = s.sample(&req(l.clone(), 0.0, MisMode::Off)).map_err(e2s)?;
    for mode in [MisMode::Average, MisMode::CropPaste] {
        let m = s.generate(&req(l.clone(), 0.0, mode)).map_err(e2s)?;
        ensure(m.latent == base.latent && m.rgb == base.rgb, || format!("{mode:?} with fraction 0 differs from vanilla"))?;
    }

    let disjoint = scene(vec![
        boxed("a red circle", [0.0, 0.0, 0.25, 0.5]),
        boxed("a blue star", [0.5, 0.5, 0.75, 1.0]),
    ]);
    let z = initial_noise::<f32>(&cfg, 77);
    let (global, merged) = s
        .merged_latent(&req(disjoint.clone(), 0.4, MisMode::CropPaste), z, MisMode::CropPaste)
        .map_err(e2s)?;
    let n = cfg.image_size;
    let (mut outside, mut inside) = (0, 0);
    for y in 0..n {
        for x in 0..n {
            let p = [(x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64];
            let in_any = disjoint.instances.iter().any(|i| paste_region(i).unwrap().contains(p));
            for c in 0..cfg.in_channels {
                let k = (c * n + y) * n + x;
                if in_any {
                    inside += 1;
                } else {
                    outside += 1;
                    ensure(merged.data()[k] == global.data()[k], || format!("outside latent {k} differs"))?;
                }
            }
        }
    }
    ensure(merged.max_abs_diff(&global) > 0.0, || "pasted regions left unchanged".into())?;
    Ok(format!(
        "fraction 0 bit-identical for average and crop-paste; crop-paste: {outside} outside latents equal global, {inside} pasted"
    ))
}

// Oracle closure

fn oracle_closure() -> Check {
    let cfg = SceneConfig::disjoint();
    let mut total = MatchSummary::default();
    for i in 0..500 {
        let sc = scene_for_index(99, i, &cfg).map_err(e2s)?;
        let r = rasterize(&sc);
        let m = match_detections(&instdiff_shapeworld::ground_truth(&sc, &r).map_err(e2s)?, &oracle_detect(&r.image));
        total.merge(&m);
    }
    ensure(total.precision() == 1.0 && total.recall() == 1.0, || format!("{total:?}"))?;
    ensure(total.min_iou >= 0.95, || format!("min IoU {:.3}", total.min_iou))?;
    ensure(total.exact_attributes == total.truths, || {
        format!("{} of {} attributes exact", total.exact_attributes, total.truths)
    })?;

    // Same property through the dataset and eval path.
    let dir = tempfile::tempdir().map_err(e2s)?;
    let rc = RunConfig::default();
    write_dataset(&rc, Split::Test, dir.path()).map_err(e2s)?;
    let items = test_items(&read_dataset(&rc, Split::Test, dir.path()).map_err(e2s)?, rc.eval.seed, 500);
    let ub = upper_bound(&items, &rc.model.conditioning.location).map_err(e2s)?;
    ensure(ub.n_samples == 500, || format!("{} layouts", ub.n_samples))?;
    let perfect = [ub.box_precision50, ub.box_recall50, ub.acc_color, ub.acc_texture, ub.acc_category];
    ensure(perfect.iter().all(|v| *v == 1.0) && ub.mean_iou >= 0.95, || format!("upper-bound row {ub:?}"))?;
    Ok(format!(
        "500 scenes, {} instances: P=R=1, min IoU {:.3}, attributes exact; upper-bound row IoU {:.3}, P/R/acc = 1",
        total.truths, total.min_iou, ub.mean_iou
    ))
}

// Training gate

fn training_gate() -> Status {
    let (Ok(ckpt), Ok(data)) = (std::env::var("INSTDIFF_ACCEPT_CKPT"), std::env::var("INSTDIFF_ACCEPT_DATA")) else {
        return Status::NotVerified(
            "needs a trained default checkpoint; set INSTDIFF_ACCEPT_CKPT and INSTDIFF_ACCEPT_DATA".into(),
        );
    };
    let run = || -> Result<(bool, String), String> {
        let m = LoadedModel::load(Path::new(&ckpt)).map_err(e2s)?;
        let records = read_dataset(&m.config, Split::Test, Path::new(&data)).map_err(e2s)?;
        let items = test_items(&records, m.config.eval.seed, m.config.eval.layouts);
        let vs = [Variant::Point, Variant::Box, Variant::Mask, Variant::Hybrid];
        let rows = m.evaluate(&items, &vs).map_err(e2s)?;
        let base = LoadedModel::untrained(m.config.clone(), m.config.train.seed).map_err(e2s)?;
        let base_rows = base.evaluate(&items, &[Variant::Hybrid]).map_err(e2s)?;
        let gates = check_gates(&rows, &base_rows, &m.config.eval.gates);
        let detail: Vec<String> = gates
            .iter()
            .map(|g| format!("{} {:.3}/{:.2}{}", g.metric, g.value, g.threshold, if g.pass { "" } else { " x" }))
            .collect();
        Ok((gates.iter().all(|g| g.pass), format!("{} layouts at step {}: {}", items.len(), m.step, detail.join(", "))))
    };
    match run() {
        Ok((true, d)) => Status::Pass(d),
        Ok((false, d)) => Status::Fail(d),
        Err(e) => Status::Fail(e),
    }
}

// Ablation

fn ablation() -> Status {
    let Ok(path) = std::env::var("INSTDIFF_ACCEPT_ABLATION") else {
        return Status::NotVerified("needs 3-seed retraining per component; set INSTDIFF_ACCEPT_ABLATION".into());
    };
    let rows: Vec<AblationRow> = match std::fs::read(&path).map_err(e2s).and_then(|b| serde_json::from_slice(&b).map_err(e2s)) {
        Ok(r) => r,
        Err(e) => return Status::Fail(format!("{path}: {e}")),
    };
    let mut ok = true;
    let mut detail = Vec::new();
    for off in [Ablation::MaskedAttention, Ablation::Scaleu, Ablation::FormatAware] {
        match rows.iter().find(|r| r.off == off) {
            Some(r) => {
                let pass = r.deltas.len() >= 3 && r.deltas.iter().all(|d| *d < 0.0);
                ok &= pass;
                let d: Vec<String> = r.deltas.iter().map(|d| format!("{d:+.3}")).collect();
                detail.push(format!("{} {} [{}]", off.name(), r.metric, d.join(" ")));
            }
            None => {
                ok = false;
                detail.push(format!("{} missing", off.name()));
            }
        }
    }
    if ok {
        Status::Pass(detail.join("; "))
    } else {
        Status::Fail(detail.join("; "))
    }
}

// Iterative determinism

async fn call(st: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> Result<(StatusCode, Vec<u8>), String> {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).map_err(e2s)?;
    let resp = router(st.clone()).oneshot(req).await.map_err(e2s)?;
    let code = resp.status();
    Ok((code, resp.into_body().collect().await.map_err(e2s)?.to_bytes().to_vec()))
}

async fn call_json(st: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> Result<Value, String> {
    let (code, b) = call(st, method, uri, body).await?;
    ensure(code == StatusCode::OK, || format!("{method} {uri}: {code} {}", String::from_utf8_lossy(&b)))?;
    serde_json::from_slice(&b).map_err(e2s)
}

fn open_state(dir: &Path, ckpt: &Path) -> Result<Arc<AppState>, String> {
    let st = AppState::new(SessionStore::open(dir).map_err(e2s)?, Duration::from_secs(120));
    st.set_model(LoadedModel::load(ckpt).map_err(e2s)?);
    Ok(Arc::new(st))
}

fn iterative_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let d = dir.path();
    let lc = RunConfig::from_toml(common::TINY_TOML, &[]).map_err(e2s)?;
    let m = common::tiny_model();
    let ckpt = d.join("m.ckpt");
    Checkpoint {
        meta: checkpoint_meta(&lc, 0),
        raw: m.weights.clone(),
        ema: None,
    }
    .save(&ckpt)
    .map_err(e2s)?;
    let layout = common::one_box_layout(0.1, 0.2, 0.6, 0.9);
    std::fs::write(d.join("l.json"), layout.to_json()).map_err(e2s)?;
    let seed = 4242u64;

    // Separate processes.
    let mut pngs = Vec::new();
    for out in ["a.png", "b.png"] {
        let o = Command::new(env!("CARGO_BIN_EXE_instdiff"))
            .current_dir(d)
            .env("RUST_LOG", "warn")
            .args(["generate", "--layout", "l.json", "--ckpt", "m.ckpt", "--seed", &seed.to_string(), "--out", out])
            .output()
            .map_err(e2s)?;
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
        pngs.push(std::fs::read(d.join(out)).map_err(e2s)?);
    }
    ensure(pngs[0] == pngs[1], || "two generate processes produced different PNGs".into())?;

    // Session created, store and model dropped, then reopened from disk.
    let state_dir = d.join("state");
    let rt = tokio::runtime::Runtime::new().map_err(e2s)?;
    let body = json!({"layout": serde_json::from_str::<Value>(&layout.to_json()).map_err(e2s)?, "seed": seed});
    let (id, first) = rt.block_on(async {
        let st = open_state(&state_dir, &ckpt)?;
        let v = call_json(&st, "POST", "/sessions", Some(body.clone())).await?;
        Ok::<_, String>((v["session_id"].as_str().unwrap_or_default().to_string(), v["image_hash"].as_str().unwrap_or_default().to_string()))
    })?;
    let (second, bytes) = rt.block_on(async {
        let st = open_state(&state_dir, &ckpt)?;
        let v = call_json(&st, "POST", &format!("/sessions/{id}/revisions"), Some(json!({"layout": body["layout"]}))).await?;
        let h = v["image_hash"].as_str().unwrap_or_default().to_string();
        let (code, bytes) = call(&st, "GET", &format!("/images/{h}"), None).await?;
        ensure(code == StatusCode::OK, || format!("image fetch {code}"))?;
        Ok::<_, String>((h, bytes))
    })?;
    ensure(first.len() == 64, || format!("bad image hash {first:?}"))?;
    ensure(first == second, || format!("revision after reopen hashed {second}, first was {first}"))?;
    ensure(bytes == pngs[0], || "service PNG differs from the CLI PNG for the same seed".into())?;
    Ok(format!("2 CLI processes and a reopened session store agree byte-for-byte (sha256 {})", &first[..12]))
}

fn main() {
    let checks: Vec<(&str, bool, Box<dyn FnOnce() -> Status>)> = vec![
        ("autodiff correctness", true, Box::new(|| autodiff().into())),
        ("FFT correctness", true, Box::new(|| fft().into())),
        ("identity at init", true, Box::new(|| identity_at_init().into())),
        ("no leakage", true, Box::new(|| no_leakage().into())),
        ("sampler degeneracy", true, Box::new(|| sampler_degeneracy().into())),
        ("oracle closure", true, Box::new(|| oracle_closure().into())),
        ("end-to-end training gate", false, Box::new(training_gate)),
        ("ablation directionality", false, Box::new(ablation)),
        ("iterative determinism", true, Box::new(|| iterative_determinism().into())),
    ];
    let mut failed = 0;
    for (name, required, f) in checks {
        let started = Instant::now();
        let status = f();
        let secs = started.elapsed().as_secs_f64();
        let (tag, detail) = match &status {
            Status::Pass(d) => ("PASS", d),
            Status::Fail(d) => ("FAIL", d),
            Status::NotVerified(d) => ("NOT VERIFIED", d),
        };
        println!("{tag:<12} {name:<26} {detail} [{secs:.1} s]");
        if required && matches!(status, Status::Fail(_)) {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

impl From<Check> for Status {
    fn from(c: Check) -> Self {
        match c {
            Ok(d) => Status::Pass(d),
            Err(d) => Status::Fail(d),
        }
    }
}
