//! DDIM generation: vanilla, latent-averaging multi-instance, and
//! crop-and-paste multi-instance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layout::{InstanceCondition, Region, SceneLayout};
use crate::locations::{BoxGeometry, Format};
use crate::model::{cfg_epsilon, ddim_step, unet_forward, NoiseSchedule, UNetConfig};
use crate::nn::{Ctx, ModelWeights};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisMode {
    Off,
    Average,
    CropPaste,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleOptions {
    pub steps: usize,
    pub guidance_scale: f64,
    pub mis_fraction: f64,
    pub mis_mode: MisMode,
    pub seed: u64,
    /// Record a crc32 of the latent after every step.
    pub debug_checksums: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 3.0,
            mis_fraction: 0.36,
            mis_mode: MisMode::Average,
            seed: 0,
            debug_checksums: false,
        }
    }
}

impl SampleOptions {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.len() {
            return Err(Error::Contract(format!("steps {} outside 1..={}", self.steps, sched.len())));
        }
        if !(0.0..=1.0).contains(&self.mis_fraction) || !self.guidance_scale.is_finite() {
            return Err(Error::Contract("mis_fraction must lie in [0, 1] and guidance be finite".into()));
        }
        Ok(())
    }

    /// Number of steps run per instance before merging.
    pub fn mis_steps(&self) -> usize {
        (self.mis_fraction * self.steps as f64).round() as usize
    }
}

#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub layout: SceneLayout,
    pub opts: SampleOptions,
}

#[derive(Clone, Debug)]
pub struct SampleOutput<T> {
    /// Final latent `[1, C, H, W]`.
    pub latent: Tensor<T>,
    /// Interleaved RGB bytes, row-major.
    pub rgb: Vec<u8>,
    pub width: usize,
    pub height: usize,
    pub checksums: Vec<u32>,
}

/// A denoiser bound to its weights and schedule. Shareable across threads.
pub struct Sampler<'a, T> {
    pub weights: &'a ModelWeights<T>,
    pub cfg: &'a UNetConfig,
    pub sched: &'a NoiseSchedule,
}

/// `z_T ~ N(0, 1)` from `seed`, `[1, C, H, W]`.
pub fn initial_noise<T: Scalar>(cfg: &UNetConfig, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    Tensor::from_fn(&[1, cfg.in_channels, s, s], |_| T::lit(rand::Rng::sample::<f64, _>(&mut rng, StandardNormal)))
}

pub fn latent_checksum<T: Scalar>(z: &Tensor<T>) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for v in z.data() {
        h.update(&v.to_f32().unwrap().to_le_bytes());
    }
    h.finalize()
}

/// Uniform mean of the instance latents and the global latent, in f64.
pub fn average_latents<T: Scalar>(latents: &[Tensor<T>], global: &Tensor<T>) -> Result<Tensor<T>> {
    if latents.is_empty() {
        return Err(Error::Contract("no instance latents to average".into()));
    }
    let mut acc: Vec<f64> = global.data().iter().map(|v| v.to_f64().unwrap()).collect();
    for l in latents {
        if l.shape() != global.shape() {
            return Err(dim_err!("latent {:?} vs global {:?}", l.shape(), global.shape()));
        }
        for (a, v) in acc.iter_mut().zip(l.data()) {
            *a += v.to_f64().unwrap();
        }
    }
    let k = (latents.len() + 1) as f64;
    Tensor::new(global.shape(), acc.into_iter().map(|a| T::lit(a / k)).collect())
}

/// Region an instance's latent is pasted into: its mask, else its box.
pub fn paste_region(inst: &InstanceCondition) -> Result<Region> {
    if let (true, Some(m)) = (inst.present(Format::Mask), inst.mask_raster()) {
        return Ok(Region::Mask(m.clone()));
    }
    if let Some(b) = inst.get(Format::Box) {
        let p = b.points();
        return Ok(Region::Box(BoxGeometry::new(p[0][0], p[0][1], p[1][0], p[1][1])?));
    }
    Err(Error::UnsupportedFormat(
        "crop-and-paste needs a box or mask on every instance".into(),
    ))
}

/// Copies `inst` into `global` wherever the pixel centre lies in `region`.
pub fn paste_latent<T: Scalar>(global: &mut Tensor<T>, inst: &Tensor<T>, region: &Region) -> Result<()> {
    if global.shape() != inst.shape() || global.rank() != 4 {
        return Err(dim_err!("paste {:?} onto {:?}", inst.shape(), global.shape()));
    }
    let [b, c, h, w] = [global.shape()[0], global.shape()[1], global.shape()[2], global.shape()[3]];
    let src = inst.data();
    let dst = global.data_mut();
    for y in 0..h {
        for x in 0..w {
            let p = [(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64];
            if !region.contains(p) {
                continue;
            }
            for bc in 0..b * c {
                let i = bc * h * w + y * w + x;
                dst[i] = src[i];
            }
        }
    }
    Ok(())
}

/// `[1, C, H, W]` in `[-1, 1]` to RGB bytes via `round((x + 1) * 127.5)`.
pub fn decode<T: Scalar>(z: &Tensor<T>) -> Result<(Vec<u8>, usize, usize)> {
    let s = z.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(dim_err!("decode expects [1, 3, H, W], got {s:?}"));
    }
    let (h, w) = (s[2], s[3]);
    let d = z.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for c in 0..3 {
            let v = d[c * h * w + i].to_f64().unwrap().clamp(-1.0, 1.0);
            out.push(((v + 1.0) * 127.5).round() as u8);
        }
    }
    Ok((out, w, h))
}

impl<'a, T: Scalar> Sampler<'a, T> {
    pub fn new(weights: &'a ModelWeights<T>, cfg: &'a UNetConfig, sched: &'a NoiseSchedule) -> Self {
        Self { weights, cfg, sched }
    }

    fn forward(&self, z: &Tensor<T>, t: usize, layout: &SceneLayout) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, self.weights, false);
        let zv = ctx.tape.constant(z.clone());
        let y = unet_forward(&mut ctx, self.cfg, zv, &[t], &[layout])?;
        Ok(ctx.tape.value(y).clone())
    }

    /// Guided noise estimate. The unconditional branch nulls every
    /// location and keeps the captions; without instances the two branches
    /// coincide and one pass suffices.
    pub fn epsilon(&self, z: &Tensor<T>, t: usize, layout: &SceneLayout, scale: f64) -> Result<Tensor<T>> {
        let c = self.forward(z, t, layout)?;
        if layout.is_empty() || scale == 1.0 {
            return Ok(c);
        }
        let u = self.forward(z, t, &layout.nulled())?;
        cfg_epsilon(&c, &u, scale)
    }

    /// Runs steps `range` of the `ts` schedule from `z`.
    fn run(
        &self,
        mut z: Tensor<T>,
        ts: &[usize],
        range: std::ops::Range<usize>,
        layout: &SceneLayout,
        opts: &SampleOptions,
        sums: &mut Vec<u32>,
    ) -> Result<Tensor<T>> {
        for i in range {
            let t = ts[i];
            let t_prev = ts.get(i + 1).map_or(-1, |&p| p as isize);
            let eps = self.epsilon(&z, t, layout, opts.guidance_scale)?;
            z = ddim_step(self.sched, &z, &eps, t, t_prev, 0.0, None, true)?;
            if !z.is_finite() {
                return Err(Error::Numerical(format!("non-finite latent at step {i}")));
            }
            if opts.debug_checksums {
                sums.push(latent_checksum(&z));
            }
        }
        Ok(z)
    }

    fn finish(&self, latent: Tensor<T>, checksums: Vec<u32>) -> Result<SampleOutput<T>> {
        let (rgb, width, height) = decode(&latent)?;
        Ok(SampleOutput {
            latent,
            rgb,
            width,
            height,
            checksums,
        })
    }

    /// Plain guided DDIM from `z_T`.
    pub fn sample_from(&self, req: &SampleRequest, z_t: Tensor<T>) -> Result<SampleOutput<T>> {
        req.opts.validate(self.sched)?;
        let ts = self.sched.ddim_timesteps(req.opts.steps)?;
        let mut sums = Vec::new();
        let z = self.run(z_t, &ts, 0..ts.len(), &req.layout, &req.opts, &mut sums)?;
        self.finish(z, sums)
    }

    pub fn sample(&self, req: &SampleRequest) -> Result<SampleOutput<T>> {
        self.sample_from(req, initial_noise(self.cfg, req.opts.seed))
    }

    /// Per-instance trajectories for `M` steps, merged into the global one
    /// by averaging or pasting, then joint denoising to the end.
    pub fn multi_instance_from(&self, req: &SampleRequest, z_t: Tensor<T>, mode: MisMode) -> Result<SampleOutput<T>> {
        let opts = &req.opts;
        opts.validate(self.sched)?;
        let m = opts.mis_steps();
        if mode == MisMode::Off || m == 0 {
            return self.sample_from(req, z_t);
        }
        let regions = if mode == MisMode::CropPaste {
            req.layout.instances.iter().map(paste_region).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let ts = self.sched.ddim_timesteps(opts.steps)?;
        let m = m.min(ts.len());
        let mut sums = Vec::new();
        let mut inst = Vec::with_capacity(req.layout.len());
        for i in 0..req.layout.len() {
            let mut scratch = Vec::new();
            inst.push(self.run(z_t.clone(), &ts, 0..m, &req.layout.only(i), opts, &mut scratch)?);
        }
        let global = self.run(z_t, &ts, 0..m, &req.layout, opts, &mut sums)?;
        let merged = self.merge(&inst, global, mode, &regions)?;
        if opts.debug_checksums {
            if let Some(last) = sums.last_mut() {
                *last = latent_checksum(&merged);
            }
        }
        let z = self.run(merged, &ts, m..ts.len(), &req.layout, opts, &mut sums)?;
        self.finish(z, sums)
    }

    /// The latent right after the merge step (for inspection and tests).
    pub fn merged_latent(&self, req: &SampleRequest, z_t: Tensor<T>, mode: MisMode) -> Result<(Tensor<T>, Tensor<T>)> {
        let opts = &req.opts;
        opts.validate(self.sched)?;
        let ts = self.sched.ddim_timesteps(opts.steps)?;
        let m = opts.mis_steps().min(ts.len());
        let regions = if mode == MisMode::CropPaste {
            req.layout.instances.iter().map(paste_region).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut scratch = Vec::new();
        let inst = (0..req.layout.len())
            .map(|i| self.run(z_t.clone(), &ts, 0..m, &req.layout.only(i), opts, &mut scratch))
            .collect::<Result<Vec<_>>>()?;
        let global = self.run(z_t, &ts, 0..m, &req.layout, opts, &mut scratch)?;
        let merged = self.merge(&inst, global.clone(), mode, &regions)?;
        Ok((global, merged))
    }

    fn merge(&self, inst: &[Tensor<T>], global: Tensor<T>, mode: MisMode, regions: &[Region]) -> Result<Tensor<T>> {
        match mode {
            MisMode::Off => Ok(global),
            MisMode::Average if inst.is_empty() => Ok(global),
            MisMode::Average => average_latents(inst, &global),
            MisMode::CropPaste => {
                let mut g = global;
                for (z, r) in inst.iter().zip(regions) {
                    paste_latent(&mut g, z, r)?;
                }
                Ok(g)
            }
        }
    }

    /// Dispatches on `req.opts.mis_mode`.
    pub fn generate(&self, req: &SampleRequest) -> Result<SampleOutput<T>> {
        let z = initial_noise(self.cfg, req.opts.seed);
        match req.opts.mis_mode {
            MisMode::Off => self.sample_from(req, z),
            mode => self.multi_instance_from(req, z, mode),
        }
    }

    pub fn multi_instance_sample(&self, req: &SampleRequest) -> Result<SampleOutput<T>> {
        self.multi_instance_from(req, initial_noise(self.cfg, req.opts.seed), MisMode::Average)
    }

    pub fn crop_and_paste_sample(&self, req: &SampleRequest) -> Result<SampleOutput<T>> {
        self.multi_instance_from(req, initial_noise(self.cfg, req.opts.seed), MisMode::CropPaste)
    }
}
