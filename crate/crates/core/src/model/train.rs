//! Noise-prediction training: condition dropout, micro-batched steps, Adam
//! with warmup and an EMA of the weights.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::unet::{unet_forward, UNetConfig};
use crate::error::{dim_err, Error, Result};
use crate::layout::SceneLayout;
use crate::locations::Format;
use crate::nn::{Ctx, ModelWeights};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Images per forward/backward pass; gradients are accumulated over
    /// `batch / micro_batch` passes.
    pub micro_batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub ema_decay: f64,
    pub null_all_p: f64,
    pub format_drop_p: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global-norm gradient clip; `None` disables.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 16,
            micro_batch: 4,
            lr: 1e-4,
            warmup: 500,
            ema_decay: 0.99,
            null_all_p: 0.1,
            format_drop_p: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let p = |x: f64| (0.0..=1.0).contains(&x);
        if !p(self.null_all_p) || !p(self.format_drop_p) || !p(self.ema_decay) {
            return Err(Error::Contract("probabilities and EMA decay must lie in [0, 1]".into()));
        }
        if self.batch == 0 || self.micro_batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Contract("batch, micro_batch and lr must be positive".into()));
        }
        Ok(())
    }

    /// Linear warmup to `lr`, constant afterwards. `step` is 0-based.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }
}

/// With probability `null_all_p` every location of every instance is
/// nulled; otherwise each present format of each instance drops
/// independently with probability `format_drop_p`. Captions are kept.
pub fn condition_dropout<R: Rng + ?Sized>(layout: &SceneLayout, rng: &mut R, cfg: &TrainConfig) -> SceneLayout {
    let mut out = layout.clone();
    if rng.random::<f64>() < cfg.null_all_p {
        return out.nulled();
    }
    for inst in &mut out.instances {
        for f in Format::ALL {
            if inst.present(f) && rng.random::<f64>() < cfg.format_drop_p {
                inst.drop_format(f);
            }
        }
    }
    out
}

/// One training image `[C, H, W]` in `[-1, 1]` with its layout.
#[derive(Clone, Debug)]
pub struct TrainExample<T> {
    pub image: Tensor<T>,
    pub layout: SceneLayout,
}

#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor<T>>,
}

/// Everything a noise predictor sees in one micro-batch. `eps` is exposed
/// only so test stubs can act as oracles.
pub struct PredictInput<'a, T> {
    pub z_t: Var,
    pub t: &'a [usize],
    pub layouts: &'a [&'a SceneLayout],
    pub eps: &'a Tensor<T>,
}

/// Loss and gradients for `batch` with an arbitrary predictor. Dropout,
/// timesteps and noise are drawn from `rng` in batch order, so the result
/// does not depend on `micro_batch`.
pub fn training_step_with<T, R, F>(
    weights: &ModelWeights<T>,
    batch: &[TrainExample<T>],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
    mut predict: F,
) -> Result<StepOutput<T>>
where
    T: Scalar,
    R: Rng + ?Sized,
    F: FnMut(&mut Ctx<T>, &PredictInput<T>) -> Result<Var>,
{
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let shape = batch[0].image.shape().to_vec();
    if batch.iter().any(|e| e.image.shape() != shape.as_slice()) {
        return Err(dim_err!("ragged training batch"));
    }
    let mut draws = Vec::with_capacity(batch.len());
    for ex in batch {
        let layout = condition_dropout(&ex.layout, rng, cfg);
        let t = rng.random_range(0..sched.len());
        let eps: Tensor<T> = Tensor::from_fn(&shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
        let z_t = sched.q_sample(&ex.image, t, &eps)?;
        draws.push((layout, t, eps, z_t));
    }

    let mut total = 0.0;
    let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for chunk in draws.chunks(cfg.micro_batch.max(1)) {
        let share = chunk.len() as f64 / batch.len() as f64;
        let zs: Vec<&Tensor<T>> = chunk.iter().map(|d| &d.3).collect();
        let es: Vec<&Tensor<T>> = chunk.iter().map(|d| &d.2).collect();
        let mut bshape = vec![chunk.len()];
        bshape.extend_from_slice(&shape);
        let z = Tensor::stack_batch(&zs)?.reshape(&bshape)?;
        let eps = Tensor::stack_batch(&es)?.reshape(&bshape)?;
        let ts: Vec<usize> = chunk.iter().map(|d| d.1).collect();
        let layouts: Vec<&SceneLayout> = chunk.iter().map(|d| &d.0).collect();

        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, weights, true);
        let zv = ctx.tape.constant(z);
        let input = PredictInput {
            z_t: zv,
            t: &ts,
            layouts: &layouts,
            eps: &eps,
        };
        let pred = predict(&mut ctx, &input)?;
        let target = ctx.tape.constant(eps);
        let d = ctx.tape.sub(pred, target)?;
        let sq = ctx.tape.square(d);
        let loss = ctx.tape.mean(sq);
        let lv = ctx.tape.value(loss).data()[0].to_f64().unwrap();
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {lv}")));
        }
        total += share * lv;
        let g = ctx.tape.backward(loss)?;
        for (name, gt) in ctx.collect_grads(&g) {
            let gt = gt.map(|v| v * T::lit(share));
            match grads.get_mut(&name) {
                Some(acc) => *acc = acc.zip_map(&gt, |a, b| a + b)?,
                None => {
                    grads.insert(name, gt);
                }
            }
        }
    }
    Ok(StepOutput { loss: total, grads })
}

/// Loss and gradients of the UNet denoiser on `batch`.
pub fn training_step<T: Scalar, R: Rng + ?Sized>(
    weights: &ModelWeights<T>,
    ucfg: &UNetConfig,
    batch: &[TrainExample<T>],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepOutput<T>> {
    training_step_with(weights, batch, sched, cfg, rng, |ctx, inp| {
        unet_forward(ctx, ucfg, inp.z_t, inp.t, inp.layouts)
    })
}

/// Global L2 norm over a gradient map.
pub fn grad_norm<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    /// Bias-corrected Adam update of every weight that has a gradient.
    pub fn update(&mut self, weights: &mut ModelWeights<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let w = weights
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown weight {name}")))?;
            if w.shape() != g.shape() {
                return Err(dim_err!("{name}: weight {:?} grad {:?}", w.shape(), g.shape()));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((wi, gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gf = gi.to_f64().unwrap();
                let mf = b1 * mi.to_f64().unwrap() + (1.0 - b1) * gf;
                let vf = b2 * vi.to_f64().unwrap() + (1.0 - b2) * gf * gf;
                *mi = T::lit(mf);
                *vi = T::lit(vf);
                let step = lr * (mf / c1) / ((vf / c2).sqrt() + self.eps);
                *wi = T::lit(wi.to_f64().unwrap() - step);
            }
        }
        Ok(())
    }
}

/// Exponential moving average `shadow <- d shadow + (1 - d) w`.
#[derive(Clone, Debug)]
pub struct Ema<T> {
    pub decay: f64,
    pub shadow: ModelWeights<T>,
}

impl<T: Scalar> Ema<T> {
    pub fn new(weights: &ModelWeights<T>, decay: f64) -> Self {
        Self {
            decay,
            shadow: weights.clone(),
        }
    }

    pub fn update(&mut self, weights: &ModelWeights<T>) -> Result<()> {
        let d = self.decay;
        for (name, s) in self.shadow.iter_mut() {
            let w = weights.get(name)?;
            for (si, wi) in s.data_mut().iter_mut().zip(w.data()) {
                *si = T::lit(d * si.to_f64().unwrap() + (1.0 - d) * wi.to_f64().unwrap());
            }
        }
        Ok(())
    }
}

/// Raw weights, optimizer, EMA and step counter of one run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub unet: UNetConfig,
    pub cfg: TrainConfig,
    pub weights: ModelWeights<T>,
    pub ema: Ema<T>,
    pub adam: Adam<T>,
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(unet: UNetConfig, cfg: TrainConfig, weights: ModelWeights<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            ema: Ema::new(&weights, cfg.ema_decay),
            adam: Adam::from_config(&cfg),
            unet,
            cfg,
            weights,
            step: 0,
        })
    }

    /// One optimizer step; returns the loss before the update.
    pub fn step<R: Rng + ?Sized>(&mut self, batch: &[TrainExample<T>], sched: &NoiseSchedule, rng: &mut R) -> Result<f64> {
        let out = training_step(&self.weights, &self.unet, batch, sched, &self.cfg, rng)?;
        self.apply(out)
    }

    /// Clip, update and EMA from a precomputed step output.
    pub fn apply(&mut self, mut out: StepOutput<T>) -> Result<f64> {
        if let Some(c) = self.cfg.grad_clip {
            let n = grad_norm(&out.grads);
            if !n.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient norm at step {}", self.step)));
            }
            if n > c {
                let s = T::lit(c / n);
                for g in out.grads.values_mut() {
                    *g = g.map(|v| v * s);
                }
            }
        }
        let lr = self.cfg.lr_at(self.step);
        self.adam.update(&mut self.weights, &out.grads, lr)?;
        self.ema.update(&self.weights)?;
        self.step += 1;
        Ok(out.loss)
    }
}
