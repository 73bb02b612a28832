//! Pixel-space UNet denoiser with fusion sites and ScaleU decoder blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    batch_mask, build_conditioning, build_cross_attention, build_unifusion, caption_tokens,
    cross_attention, ground_batch, unifusion_forward, ConditioningConfig, Grounding,
};
use crate::error::{dim_err, Error, Result};
use crate::layout::{CaptionTokens, SceneLayout};
use crate::nn::{Builder, Ctx, ModelWeights};
use crate::scaleu::{build_scaleu, scaleu_forward, ScaleUConfig, ScaleUMode};
use crate::scalar::Scalar;
use crate::tensor::{is_pow2, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Channel width per resolution level, finest first.
    pub widths: Vec<usize>,
    pub res_blocks: usize,
    pub groups: usize,
    pub time_dim: usize,
    /// Feature resolutions that get a fusion + cross-attention site, once
    /// in the encoder and once in the decoder.
    pub site_resolutions: Vec<usize>,
    pub conditioning: ConditioningConfig,
    pub scaleu: ScaleUConfig,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            widths: vec![32, 64, 128],
            res_blocks: 2,
            groups: 8,
            time_dim: 128,
            site_resolutions: vec![32, 16],
            conditioning: ConditioningConfig::default(),
            scaleu: ScaleUConfig::default(),
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.image_size >> level
    }

    pub fn has_site(&self, level: usize) -> bool {
        self.site_resolutions.contains(&self.resolution(level))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.widths.is_empty() || self.res_blocks == 0 || self.in_channels == 0 {
            return bad("empty UNet".into());
        }
        if !is_pow2(self.image_size) || self.image_size >> (self.levels() - 1) < 2 {
            return bad(format!("image size {} unsupported for {} levels", self.image_size, self.levels()));
        }
        for &w in &self.widths {
            if w % self.groups != 0 {
                return bad(format!("width {w} not divisible by {} groups", self.groups));
            }
            if w % self.conditioning.heads != 0 {
                return bad(format!("width {w} not divisible by {} heads", self.conditioning.heads));
            }
        }
        for &r in &self.site_resolutions {
            if !(0..self.levels()).any(|l| self.resolution(l) == r) {
                return bad(format!("no level at site resolution {r}"));
            }
        }
        if self.time_dim == 0 || self.widths[0] % 2 != 0 {
            return bad("time embedding needs an even base width".into());
        }
        self.conditioning.location.validate()
    }
}

fn build_res<T: Scalar, R: rand::Rng + ?Sized>(
    b: &mut Builder<T, R>,
    p: &str,
    cin: usize,
    cout: usize,
    tdim: usize,
) -> Result<()> {
    b.norm(&format!("{p}.norm1"), cin)?;
    b.conv(&format!("{p}.conv1"), cin, cout, 3)?;
    b.linear(&format!("{p}.temb"), tdim, cout)?;
    b.norm(&format!("{p}.norm2"), cout)?;
    b.conv(&format!("{p}.conv2"), cout, cout, 3)?;
    if cin != cout {
        b.conv(&format!("{p}.skip"), cin, cout, 1)?;
    }
    Ok(())
}

fn build_site<T: Scalar, R: rand::Rng + ?Sized>(
    b: &mut Builder<T, R>,
    p: &str,
    c: usize,
    cfg: &UNetConfig,
) -> Result<()> {
    let cc = &cfg.conditioning;
    b.norm(&format!("{p}.norm"), c)?;
    build_unifusion(b, &format!("{p}.uf"), c, cc.token_dim, cc.heads)?;
    b.norm(&format!("{p}.norm2"), c)?;
    build_cross_attention(b, &format!("{p}.xa"), c, cc.text_dim, cc.heads)
}

/// Deterministic initialisation. Gates and ScaleU vectors start at zero.
pub fn build_unet<T: Scalar>(cfg: &UNetConfig, seed: u64) -> Result<ModelWeights<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(&mut rng);
    let w0 = cfg.widths[0];
    b.linear("time.l1", w0, cfg.time_dim)?;
    b.linear("time.l2", cfg.time_dim, cfg.time_dim)?;
    b.conv("conv_in", cfg.in_channels, w0, 3)?;

    let mut c = w0;
    for l in 0..cfg.levels() {
        let w = cfg.widths[l];
        for j in 0..cfg.res_blocks {
            build_res(&mut b, &format!("enc.{l}.{j}"), c, w, cfg.time_dim)?;
            c = w;
        }
        if cfg.has_site(l) {
            build_site(&mut b, &format!("enc.{l}.site"), w, cfg)?;
        }
        if l + 1 < cfg.levels() {
            b.conv(&format!("enc.{l}.down"), w, w, 4)?;
        }
    }
    build_res(&mut b, "mid.0", c, c, cfg.time_dim)?;
    build_res(&mut b, "mid.1", c, c, cfg.time_dim)?;

    for l in (0..cfg.levels()).rev() {
        let w = cfg.widths[l];
        for j in 0..cfg.res_blocks {
            let main = c;
            if cfg.scaleu.mode == ScaleUMode::Learned {
                build_scaleu(&mut b, &format!("dec.{l}.{j}.scaleu"), main, w)?;
            }
            build_res(&mut b, &format!("dec.{l}.{j}"), main + w, w, cfg.time_dim)?;
            c = w;
        }
        if cfg.has_site(l) {
            build_site(&mut b, &format!("dec.{l}.site"), w, cfg)?;
        }
        if l > 0 {
            b.conv(&format!("dec.{l}.up"), w, cfg.widths[l - 1], 3)?;
            c = cfg.widths[l - 1];
        }
    }
    b.norm("out.norm", w0)?;
    b.conv("out.conv", w0, cfg.in_channels, 3)?;
    build_conditioning(&mut b, &cfg.conditioning)?;
    Ok(b.finish())
}

/// `[sin(t f_i), cos(t f_i)]` with `f_i = 10000^(-i / half)`, `[B, dim]`.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[ts.len(), dim], |e| {
        let (b, k) = (e / dim, e % dim);
        let i = k % half;
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = ts[b] as f64 * f;
        T::lit(if k < half { a.sin() } else { a.cos() })
    })
}

fn res_forward<T: Scalar>(ctx: &mut Ctx<T>, p: &str, x: Var, temb: Var, groups: usize) -> Result<Var> {
    let h = ctx.norm(x, &format!("{p}.norm1"), groups)?;
    let h = ctx.tape.silu(h);
    let h = ctx.conv(h, &format!("{p}.conv1"), 1, 1)?;
    let t = ctx.linear(temb, &format!("{p}.temb"))?;
    let h = ctx.tape.add_channel(h, t)?;
    let h = ctx.norm(h, &format!("{p}.norm2"), groups)?;
    let h = ctx.tape.silu(h);
    let h = ctx.conv(h, &format!("{p}.conv2"), 1, 1)?;
    let skip = if ctx.weights().contains(&format!("{p}.skip.w")) {
        ctx.conv(x, &format!("{p}.skip"), 1, 0)?
    } else {
        x
    };
    ctx.tape.add(skip, h)
}

/// Per-forward conditioning shared by every site.
pub struct Conditioning<T> {
    grounding: Grounding,
    text: Var,
    text_mask_by_res: Vec<(usize, Option<Tensor<T>>)>,
    masks: Vec<(usize, Option<Tensor<T>>)>,
}

impl<T: Scalar> Conditioning<T> {
    pub fn build(ctx: &mut Ctx<T>, cfg: &UNetConfig, layouts: &[&SceneLayout]) -> Result<Self> {
        let cc = &cfg.conditioning;
        let grounding = ground_batch(ctx, layouts, cc)?;
        let captions: Vec<&CaptionTokens> = layouts.iter().map(|l| &l.caption).collect();
        let mut text = None;
        let mut text_mask_by_res = Vec::new();
        let mut masks = Vec::new();
        let mut resolutions: Vec<usize> = cfg.site_resolutions.clone();
        resolutions.sort_unstable();
        resolutions.dedup();
        for r in resolutions {
            let (t, tm) = caption_tokens(ctx, &captions, r * r)?;
            text.get_or_insert(t);
            text_mask_by_res.push((r, tm));
            let mask = if grounding.tokens.is_some() || cc.masked_attention {
                batch_mask(layouts, r, r, grounding.n_max, grounding.per_instance, cc.masked_attention)?
            } else {
                None
            };
            masks.push((r, mask));
        }
        let text = match text {
            Some(t) => t,
            None => caption_tokens(ctx, &captions, 1)?.0,
        };
        Ok(Self {
            grounding,
            text,
            text_mask_by_res,
            masks,
        })
    }

    fn mask(&self, r: usize) -> Option<&Tensor<T>> {
        self.masks.iter().find(|(k, _)| *k == r).and_then(|(_, m)| m.as_ref())
    }

    fn text_mask(&self, r: usize) -> Option<&Tensor<T>> {
        self.text_mask_by_res
            .iter()
            .find(|(k, _)| *k == r)
            .and_then(|(_, m)| m.as_ref())
    }
}

fn site_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    p: &str,
    h: Var,
    cfg: &UNetConfig,
    cond: &Conditioning<T>,
) -> Result<Var> {
    let sh = ctx.tape.shape(h).to_vec();
    let (r, groups, heads) = (sh[2], cfg.groups, cfg.conditioning.heads);
    let v = ctx.tape.to_tokens(h)?;
    let n = ctx.norm(h, &format!("{p}.norm"), groups)?;
    let xn = ctx.tape.to_tokens(n)?;
    let v = unifusion_forward(ctx, &format!("{p}.uf"), v, xn, cond.grounding.tokens, cond.mask(r), heads)?;
    let h = ctx.tape.from_tokens(v, sh[2], sh[3])?;
    let n = ctx.norm(h, &format!("{p}.norm2"), groups)?;
    let xn = ctx.tape.to_tokens(n)?;
    let v = cross_attention(ctx, &format!("{p}.xa"), v, xn, cond.text, cond.text_mask(r), heads)?;
    ctx.tape.from_tokens(v, sh[2], sh[3])
}

/// Predicted noise for `z [B, C, H, W]` at timesteps `ts`, one layout per
/// batch item.
pub fn unet_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    cfg: &UNetConfig,
    z: Var,
    ts: &[usize],
    layouts: &[&SceneLayout],
) -> Result<Var> {
    let sz = ctx.tape.shape(z).to_vec();
    let want = [ts.len(), cfg.in_channels, cfg.image_size, cfg.image_size];
    if sz != want || layouts.len() != ts.len() {
        return Err(dim_err!(
            "unet input {sz:?} with {} timesteps and {} layouts, expected {want:?}",
            ts.len(),
            layouts.len()
        ));
    }
    let cond = Conditioning::build(ctx, cfg, layouts)?;
    let g = cfg.groups;

    let te = ctx.tape.constant(timestep_embedding(ts, cfg.widths[0]));
    let te = ctx.linear(te, "time.l1")?;
    let te = ctx.tape.silu(te);
    let te = ctx.linear(te, "time.l2")?;
    let temb = ctx.tape.silu(te);

    let mut h = ctx.conv(z, "conv_in", 1, 1)?;
    let mut skips = Vec::new();
    for l in 0..cfg.levels() {
        for j in 0..cfg.res_blocks {
            h = res_forward(ctx, &format!("enc.{l}.{j}"), h, temb, g)?;
            if j + 1 == cfg.res_blocks && cfg.has_site(l) {
                h = site_forward(ctx, &format!("enc.{l}.site"), h, cfg, &cond)?;
            }
            skips.push(h);
        }
        if l + 1 < cfg.levels() {
            h = ctx.conv(h, &format!("enc.{l}.down"), 2, 1)?;
        }
    }
    h = res_forward(ctx, "mid.0", h, temb, g)?;
    h = res_forward(ctx, "mid.1", h, temb, g)?;

    for l in (0..cfg.levels()).rev() {
        for j in 0..cfg.res_blocks {
            let skip = skips.pop().expect("one skip per encoder block");
            let (hb, hs) = scaleu_forward(ctx, &format!("dec.{l}.{j}.scaleu"), h, skip, &cfg.scaleu)?;
            let cat = ctx.tape.concat_channels(hb, hs)?;
            h = res_forward(ctx, &format!("dec.{l}.{j}"), cat, temb, g)?;
        }
        if cfg.has_site(l) {
            h = site_forward(ctx, &format!("dec.{l}.site"), h, cfg, &cond)?;
        }
        if l > 0 {
            h = ctx.tape.upsample2x(h)?;
            h = ctx.conv(h, &format!("dec.{l}.up"), 1, 1)?;
        }
    }
    let h = ctx.norm(h, "out.norm", g)?;
    let h = ctx.tape.silu(h);
    ctx.conv(h, "out.conv", 1, 1)
}

/// Closed-form parameter count for `cfg`.
pub fn expected_param_count(cfg: &UNetConfig) -> usize {
    let cc = &cfg.conditioning;
    let lin = |i: usize, o: usize| i * o + o;
    let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
    let res = |i: usize, o: usize| {
        2 * i + conv(i, o, 3) + lin(cfg.time_dim, o) + 2 * o + conv(o, o, 3) + if i != o { conv(i, o, 1) } else { 0 }
    };
    let heads = |c: usize, kv: usize| {
        let dh = c / cc.heads;
        cc.heads * (lin(c, dh) + 2 * lin(kv, dh) + dh * c) + c
    };
    let site = |c: usize| 2 * c + lin(cc.token_dim, c) + heads(c, c) + 1 + 2 * c + heads(c, cc.text_dim);

    let w0 = cfg.widths[0];
    let mut n = lin(w0, cfg.time_dim) + lin(cfg.time_dim, cfg.time_dim) + conv(cfg.in_channels, w0, 3);
    let mut c = w0;
    for l in 0..cfg.levels() {
        let w = cfg.widths[l];
        for _ in 0..cfg.res_blocks {
            n += res(c, w);
            c = w;
        }
        if cfg.has_site(l) {
            n += site(w);
        }
        if l + 1 < cfg.levels() {
            n += conv(w, w, 4);
        }
    }
    n += 2 * res(c, c);
    for l in (0..cfg.levels()).rev() {
        let w = cfg.widths[l];
        for _ in 0..cfg.res_blocks {
            if cfg.scaleu.mode == ScaleUMode::Learned {
                n += c + w;
            }
            n += res(c + w, w);
            c = w;
        }
        if cfg.has_site(l) {
            n += site(w);
        }
        if l > 0 {
            n += conv(w, cfg.widths[l - 1], 3);
            c = cfg.widths[l - 1];
        }
    }
    n += 2 * w0 + conv(w0, cfg.in_channels, 3);

    let loc = &cc.location;
    n += crate::layout::vocab_size() * cc.text_dim;
    for f in crate::locations::Format::ALL {
        let d = loc.embed_dim(f);
        n += (cc.text_dim + d) * cc.tokenizer_hidden + cc.tokenizer_hidden;
        n += lin(cc.tokenizer_hidden, cc.token_dim) + d + 4 * loc.bandwidth;
    }
    if !cc.format_aware {
        n += 4 * cc.token_dim * cc.tokenizer_hidden + cc.tokenizer_hidden + lin(cc.tokenizer_hidden, cc.token_dim);
    }
    n
}
