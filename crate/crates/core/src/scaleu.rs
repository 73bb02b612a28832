//! Learned re-weighting of decoder features.
//!
//! Main-path features are scaled per channel by `tanh(s_b) + 1`; skip
//! features have their low-frequency band (centred radius `< r_thresh`)
//! scaled by `tanh(s_s) + 1` in the Fourier domain.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Builder, Ctx};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScaleUMode {
    /// Plain skip concatenation.
    Off,
    /// Learned `s_b`, `s_s`, zero-initialised.
    Learned,
    /// Fixed multipliers on the main path and the skip low band.
    Fixed { backbone: f64, skip: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleUConfig {
    pub mode: ScaleUMode,
    /// `r_thresh = round(radius_frac * r_max)` unless `r_thresh` is set.
    pub radius_frac: f64,
    pub r_thresh: Option<usize>,
}

impl Default for ScaleUConfig {
    fn default() -> Self {
        Self {
            mode: ScaleUMode::Learned,
            radius_frac: 0.25,
            r_thresh: None,
        }
    }
}

impl ScaleUConfig {
    pub fn threshold(&self, h: usize, w: usize) -> usize {
        match self.r_thresh {
            Some(r) => r.min(max_radius(h, w).ceil() as usize + 1),
            None => (self.radius_frac * max_radius(h, w)).round() as usize,
        }
    }
}

/// Signed frequency of bin `k` out of `n` (fft-shifted coordinate).
fn centred(k: usize, n: usize) -> f64 {
    if k < n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Largest centred radial index for an `h x w` spectrum.
pub fn max_radius(h: usize, w: usize) -> f64 {
    let (a, b) = ((h / 2) as f64, (w / 2) as f64);
    (a * a + b * b).sqrt()
}

/// Bins whose centred radius is `< r_thresh`, row-major with DC at (0, 0).
pub fn lowpass_bins(h: usize, w: usize, r_thresh: usize) -> Vec<bool> {
    (0..h * w)
        .map(|i| {
            let (ky, kx) = (centred(i / w, h), centred(i % w, w));
            (ky * ky + kx * kx).sqrt() < r_thresh as f64
        })
        .collect()
}

/// Per-bin multiplier `alpha = tanh(s) + 1` inside the threshold, 1 outside.
pub fn radial_frequency_mask(h: usize, w: usize, r_thresh: usize, s: f64) -> Vec<f64> {
    let a = s.tanh() + 1.0;
    lowpass_bins(h, w, r_thresh)
        .into_iter()
        .map(|lp| if lp { a } else { 1.0 })
        .collect()
}

/// Zero `s_b` (main channels) and `s_s` (skip channels) for one block.
pub fn build_scaleu<T: Scalar, R: Rng + ?Sized>(
    b: &mut Builder<T, R>,
    prefix: &str,
    main: usize,
    skip: usize,
) -> Result<()> {
    b.zeros(&format!("{prefix}.sb"), &[main])?;
    b.zeros(&format!("{prefix}.ss"), &[skip])
}

/// `(F_b * (tanh(s_b) + 1), IFFT(FFT(F_s) * alpha))` for `[B, C, H, W]` maps.
pub fn scaleu_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    prefix: &str,
    fb: Var,
    fs: Var,
    cfg: &ScaleUConfig,
) -> Result<(Var, Var)> {
    let (sb, ss) = match cfg.mode {
        ScaleUMode::Off => return Ok((fb, fs)),
        ScaleUMode::Learned => (ctx.p(&format!("{prefix}.sb"))?, ctx.p(&format!("{prefix}.ss"))?),
        ScaleUMode::Fixed { backbone, skip } => {
            // tanh(s) + 1 = m  <=>  s = atanh(m - 1)
            let cb = ctx.tape.shape(fb)[1];
            let cs = ctx.tape.shape(fs)[1];
            let vb = Tensor::full(&[cb], T::lit((backbone - 1.0).atanh()));
            let vs = Tensor::full(&[cs], T::lit((skip - 1.0).atanh()));
            (ctx.tape.constant(vb), ctx.tape.constant(vs))
        }
    };
    let t = ctx.tape.tanh(sb);
    let scale = ctx.tape.offset(t, 1.0);
    let fb = ctx.tape.mul_channel(fb, scale)?;
    let sh = ctx.tape.shape(fs).to_vec();
    let lp = lowpass_bins(sh[2], sh[3], cfg.threshold(sh[2], sh[3]));
    let fs = ctx.tape.spectral_scale(fs, ss, &lp)?;
    Ok((fb, fs))
}
