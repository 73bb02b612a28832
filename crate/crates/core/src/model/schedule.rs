//! Linear-beta noise schedule, forward noising and deterministic DDIM.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let t = cfg.steps;
        if t == 0 || !(0.0 < cfg.beta_start && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Contract(format!("bad schedule {cfg:?}")));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| {
                let f = if t == 1 { 0.0 } else { i as f64 / (t - 1) as f64 };
                cfg.beta_start + f * (cfg.beta_end - cfg.beta_start)
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// `alpha_bar(t)`; `t = -1` is the clean boundary with value 1.
    pub fn alpha_bar(&self, t: isize) -> f64 {
        if t < 0 {
            1.0
        } else {
            self.alpha_bars[t as usize]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Contract(format!("timestep {t} outside 0..{}", self.len())));
        }
        Ok(())
    }

    /// `sqrt(ab) z0 + sqrt(1 - ab) eps`.
    pub fn q_sample<T: Scalar>(&self, z0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_t(t)?;
        let ab = self.alpha_bars[t];
        let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        z0.zip_map(eps, |z, e| a * z + b * e)
    }

    /// Descending timesteps of an `n`-step sampler: `(i + 1) T / n - 1`.
    pub fn ddim_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.len() {
            return Err(Error::Contract(format!("{n} sampling steps for T={}", self.len())));
        }
        Ok((0..n).rev().map(|i| (i + 1) * self.len() / n - 1).collect())
    }
}

/// One DDIM update from `t` to `t_prev` (`-1` = clean). With `eta > 0`,
/// `noise` supplies the fresh Gaussian term.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<T: Scalar>(
    sched: &NoiseSchedule,
    z_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    t_prev: isize,
    eta: f64,
    noise: Option<&Tensor<T>>,
    clamp: bool,
) -> Result<Tensor<T>> {
    if t_prev >= t as isize {
        return Err(Error::Contract(format!("t_prev {t_prev} must be < t {t}")));
    }
    sched.check_t(t)?;
    if z_t.shape() != eps.shape() {
        return Err(dim_err!("z {:?} vs eps {:?}", z_t.shape(), eps.shape()));
    }
    let ab = sched.alpha_bar(t as isize);
    let ab_prev = sched.alpha_bar(t_prev);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = Vec::with_capacity(z_t.numel());
    for (i, (z, e)) in z_t.data().iter().zip(eps.data()).enumerate() {
        let (z, e) = (z.to_f64().unwrap(), e.to_f64().unwrap());
        let mut x0 = (z - sb * e) / sa;
        if clamp {
            x0 = x0.clamp(-1.0, 1.0);
        }
        let mut v = ab_prev.sqrt() * x0 + dir * e;
        if sigma > 0.0 {
            let n = noise.ok_or_else(|| Error::Contract("eta > 0 needs noise".into()))?;
            v += sigma * n.data()[i].to_f64().unwrap();
        }
        out.push(T::lit(v));
    }
    Tensor::new(z_t.shape(), out)
}

/// `eps_u + scale (eps_c - eps_u)`.
pub fn cfg_epsilon<T: Scalar>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    if scale == 1.0 && eps_cond.shape() == eps_uncond.shape() {
        return Ok(eps_cond.clone());
    }
    let s = T::lit(scale);
    eps_cond.zip_map(eps_uncond, |c, u| u + s * (c - u))
}
