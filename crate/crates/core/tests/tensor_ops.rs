use instdiff_core::tensor::{fft2, grad_check, ifft2};
use instdiff_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

const TOL: f64 = 1e-4;

#[test]
fn matmul_gradients() {
    let r = grad_check(
        |t, v| {
            let c = t.matmul(v[0], v[1])?;
            let s = t.square(c);
            Ok(t.sum(s))
        },
        &[rand_tensor(&[3, 4], 1), rand_tensor(&[4, 2], 2)],
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn bmm_gradients_all_transpose_modes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let r = grad_check(
            |t, v| {
                let c = t.bmm(v[0], v[1], ta, tb)?;
                let s = t.tanh(c);
                Ok(t.sum(s))
            },
            &[rand_tensor(&sa, 3), rand_tensor(&sb, 4)],
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_err < TOL, "ta={ta} tb={tb} {r:?}");
    }
}

#[test]
fn conv2d_gradients() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 4), (1, 0, 1), (2, 0, 2)] {
        let r = grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                let s = t.square(y);
                Ok(t.sum(s))
            },
            &[
                rand_tensor(&[2, 2, 4, 4], 5),
                rand_tensor(&[3, 2, k, k], 6),
                rand_tensor(&[3], 7),
            ],
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_err < TOL, "stride={stride} pad={pad} {r:?}");
    }
}

#[test]
fn group_norm_gradients_and_moments() {
    let x = rand_tensor(&[2, 4, 3, 3], 8);
    let r = grad_check(
        |t, v| {
            let y = t.group_norm(v[0], 2, v[1], v[2], 1e-5)?;
            let w = t.constant(rand_tensor(&[2, 4, 3, 3], 99));
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        },
        &[x.clone(), rand_tensor(&[4], 9), rand_tensor(&[4], 10)],
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");

    let mut t = Tape::new();
    let xv = t.constant(x);
    let g = t.constant(Tensor::ones(&[4]));
    let b = t.constant(Tensor::zeros(&[4]));
    let y = t.group_norm(xv, 2, g, b, 1e-5).unwrap();
    for chunk in t.value(y).data().chunks(18) {
        let mean = chunk.iter().sum::<f64>() / 18.0;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn elementwise_gradients() {
    let x = rand_tensor(&[2, 3, 2, 2], 11);
    let y = rand_tensor(&[2, 3, 2, 2], 12);
    let c = rand_tensor(&[3], 13);
    let bc = rand_tensor(&[2, 3], 14);
    let s = rand_tensor(&[1], 15);
    let r = grad_check(
        |t, v| {
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
        &[x, y, c, bc, s],
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn bias_and_layout_gradients() {
    let r = grad_check(
        |t, v| {
            let tok = t.to_tokens(v[0])?; // [2, 4, 3]
            let tok = t.add_bias(tok, v[1])?;
            let extra = t.concat_rows(tok, v[2])?; // [2, 6, 3]
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
        &[
            rand_tensor(&[2, 3, 2, 2], 16),
            rand_tensor(&[3], 17),
            rand_tensor(&[2, 2, 3], 18),
        ],
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn softmax_chain_gradients_with_mask() {
    let mut mask = Tensor::zeros(&[2, 3, 4]);
    for (i, m) in mask.data_mut().iter_mut().enumerate() {
        if i % 3 == 1 {
            *m = f64::NEG_INFINITY;
        }
    }
    let r = grad_check(
        |t, v| {
            let logits = t.bmm(v[0], v[1], false, true)?; // [2,3,4]
            let p = t.masked_softmax(logits, Some(&mask))?;
            let o = t.bmm(p, v[1], false, false)?;
            let s = t.square(o);
            Ok(t.sum(s))
        },
        &[rand_tensor(&[2, 3, 5], 19), rand_tensor(&[2, 4, 5], 20)],
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn masked_positions_get_exact_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let logits = Tensor::from_fn(&[16, 9], |_| rng.random_range(-30.0..30.0));
    let mask = Tensor::from_fn(&[16, 9], |i| if i % 4 == 2 { f64::NEG_INFINITY } else { 0.0 });
    let mut t = Tape::new();
    let x = t.constant(logits);
    let y = t.masked_softmax(x, Some(&mask)).unwrap();
    let y = t.value(y);
    for (row, mrow) in y.data().chunks(9).zip(mask.data().chunks(9)) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        for (v, m) in row.iter().zip(mrow) {
            if *m == f64::NEG_INFINITY {
                assert_eq!(*v, 0.0);
            }
        }
    }
}

#[test]
fn embed_and_blend_gradients() {
    let r = grad_check(
        |t, v| {
            let e = t.embed_bag(v[0], &[vec![0, 2], vec![1], vec![2, 2, 3]])?;
            let b = t.blend_rows(e, v[1], &[1.0, 0.0, 1.0])?;
            let s = t.square(b);
            Ok(t.sum(s))
        },
        &[rand_tensor(&[4, 3], 22), rand_tensor(&[3], 23)],
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn gather_rows_gradients() {
    let r = grad_check(
        |t, v| {
            let g = t.gather_rows(v[0], &[Some(2), None, Some(0), Some(2)])?;
            let s = t.square(g);
            Ok(t.sum(s))
        },
        &[rand_tensor(&[3, 4], 24)],
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn spectral_scale_gradients() {
    let lowpass: Vec<bool> = (0..16).map(|i| i % 5 == 0).collect();
    let r = grad_check(
        |t, v| {
            let y = t.spectral_scale(v[0], v[1], &lowpass)?;
            let w = t.constant(rand_tensor(&[2, 3, 4, 4], 24));
            let p = t.mul(y, w)?;
            let q = t.square(p);
            Ok(t.sum(q))
        },
        &[rand_tensor(&[2, 3, 4, 4], 25), rand_tensor(&[3], 26)],
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn tape_replay_is_deterministic() {
    let run = || {
        let mut t = Tape::new();
        let x = t.leaf(rand_tensor(&[1, 2, 4, 4], 27), true);
        let w = t.leaf(rand_tensor(&[2, 2, 3, 3], 28), true);
        let b = t.leaf(rand_tensor(&[2], 29), true);
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        let y = t.silu(y);
        let l = t.mean(y);
        let g = t.backward(l).unwrap();
        (g.get(x), g.get(w), g.get(b))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2.data(), b.2.data());
}

#[test]
fn fft_roundtrip_and_parseval_all_sizes() {
    let sizes = [1usize, 2, 4, 8, 16, 32, 64];
    for &h in &sizes {
        for &w in &sizes {
            let x = rand_tensor(&[h, w], (h * 100 + w) as u64);
            let f = fft2(&x).unwrap();
            let back = ifft2(&f).unwrap();
            assert!(back.max_abs_diff(&x) < 1e-6, "{h}x{w}");
            // Direct summation on both sides.
            let time: f64 = x.data().iter().map(|v| v * v).sum();
            let freq: f64 = f
                .re()
                .iter()
                .zip(f.im())
                .map(|(a, b)| a * a + b * b)
                .sum::<f64>()
                / (h * w) as f64;
            assert!((time - freq).abs() <= 1e-5 * time.max(1.0), "{h}x{w}");
        }
    }
}

#[test]
fn fft_roundtrip_f32_storage() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = Tensor::<f32>::from_fn(&[3, 64, 64], |_| rng.random_range(-1.0..1.0));
    let back = ifft2(&fft2(&x).unwrap()).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-6);
}

proptest! {
    #[test]
    fn fft_is_linear(a in -3.0f64..3.0, seed in 0u64..1000) {
        let x = rand_tensor(&[8, 4], seed);
        let y = rand_tensor(&[8, 4], seed + 1);
        let comb = x.zip_map(&y, |p, q| a * p + q).unwrap();
        let (fx, fy, fc) = (fft2(&x).unwrap(), fft2(&y).unwrap(), fft2(&comb).unwrap());
        for i in 0..32 {
            prop_assert!((a * fx.re()[i] + fy.re()[i] - fc.re()[i]).abs() < 1e-9);
            prop_assert!((a * fx.im()[i] + fy.im()[i] - fc.im()[i]).abs() < 1e-9);
        }
    }
}
