//! Grounding tokens and their fusion into visual tokens.
//!
//! Each instance yields one token per location format:
//! `g_f = MLP_f([text, s_f * gamma(p_f) + (1 - s_f) * e_f])`. Tokens join the
//! visual tokens in a masked self-attention whose output, restricted to the
//! visual rows, is added back through a `tanh(omega)` gate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layout::{vocab_size, CaptionTokens, InstanceCondition, Region, SceneLayout};
use crate::locations::{fourier_embed, Format, LocationConfig};
use crate::nn::{init_normal, Builder, Ctx};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningConfig {
    pub text_dim: usize,
    pub token_dim: usize,
    pub tokenizer_hidden: usize,
    pub heads: usize,
    /// Separate token streams per format; off fuses the four into one token.
    pub format_aware: bool,
    /// Instance-masked attention; off lets every token see every token.
    pub masked_attention: bool,
    pub location: LocationConfig,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            text_dim: 64,
            token_dim: 64,
            tokenizer_hidden: 128,
            heads: 1,
            format_aware: true,
            masked_attention: true,
            location: LocationConfig::default(),
        }
    }
}

impl ConditioningConfig {
    pub fn tokens_per_instance(&self) -> usize {
        if self.format_aware {
            4
        } else {
            1
        }
    }
}

/// Text table, per-format tokenizers, null and pad vectors, joint fuser.
pub fn build_conditioning<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<T, R>, cfg: &ConditioningConfig) -> Result<()> {
    let (dt, hid, dg) = (cfg.text_dim, cfg.tokenizer_hidden, cfg.token_dim);
    let table = init_normal(&[vocab_size(), dt], 1.0, b.rng());
    b.tensor("text.embed", table)?;
    let fdim = 4 * cfg.location.bandwidth;
    for f in Format::ALL {
        let p = format!("tok.{}", f.name());
        let d = cfg.location.embed_dim(f);
        // First layer split into text and location blocks of one matrix.
        let fan = dt + d;
        let wt = crate::nn::init_uniform(&[dt, hid], fan, b.rng());
        let wl = crate::nn::init_uniform(&[d, hid], fan, b.rng());
        let b1 = crate::nn::init_uniform(&[hid], fan, b.rng());
        b.tensor(format!("{p}.text"), wt)?;
        b.tensor(format!("{p}.loc"), wl)?;
        b.tensor(format!("{p}.b1"), b1)?;
        b.linear(&format!("{p}.out"), hid, dg)?;
        let null = init_normal(&[d], 1.0, b.rng());
        b.tensor(format!("{p}.null"), null)?;
        let pad = init_normal(&[fdim], 1.0, b.rng());
        b.tensor(format!("{p}.pad"), pad)?;
    }
    if !cfg.format_aware {
        for f in Format::ALL {
            let w = crate::nn::init_uniform(&[dg, hid], 4 * dg, b.rng());
            b.tensor(format!("joint.{}", f.name()), w)?;
        }
        b.zeros("joint.b1", &[hid])?;
        b.linear("joint.out", hid, dg)?;
    }
    Ok(())
}

/// Mean-pooled caption embeddings, `[N, text_dim]`.
pub fn encode_captions<T: Scalar>(ctx: &mut Ctx<T>, captions: &[&CaptionTokens]) -> Result<Var> {
    let table = ctx.p("text.embed")?;
    let bags: Vec<Vec<usize>> = captions.iter().map(|c| c.ids().to_vec()).collect();
    ctx.tape.embed_bag(table, &bags)
}

/// Location features for one format over `insts`: `[N, embed_dim(f)]`, with
/// padding slots replaced by the learned pad vector and absent formats by
/// the learned null token.
pub fn location_features<T: Scalar>(
    ctx: &mut Ctx<T>,
    f: Format,
    insts: &[&InstanceCondition],
    cfg: &LocationConfig,
) -> Result<Var> {
    let cap = cfg.capacity(f);
    let fd = 4 * cfg.bandwidth;
    let n = insts.len();
    let mut gamma = vec![T::zero(); n * cap * fd];
    let mut keep_slot = vec![1.0; n * cap];
    let mut present = vec![0.0; n];
    for (i, inst) in insts.iter().enumerate() {
        let Some(ps) = inst.get(f) else { continue };
        if ps.capacity() != cap {
            return Err(Error::Contract(format!(
                "{} point set capacity {} != configured {cap}",
                f.name(),
                ps.capacity()
            )));
        }
        present[i] = 1.0;
        for (k, v) in fourier_embed(ps, cfg.bandwidth).into_iter().enumerate() {
            gamma[i * cap * fd + k] = T::lit(v);
        }
        for k in ps.points().len()..cap {
            keep_slot[i * cap + k] = 0.0;
        }
    }
    let prefix = format!("tok.{}", f.name());
    let g = ctx.tape.constant(Tensor::new(&[n * cap, fd], gamma)?);
    let pad = ctx.p(&format!("{prefix}.pad"))?;
    let g = ctx.tape.blend_rows(g, pad, &keep_slot)?;
    let g = ctx.tape.reshape(g, &[n, cap * fd])?;
    let null = ctx.p(&format!("{prefix}.null"))?;
    ctx.tape.blend_rows(g, null, &present)
}

/// Grounding tokens for format `f`, `[N, token_dim]`.
pub fn tokenize_format<T: Scalar>(
    ctx: &mut Ctx<T>,
    f: Format,
    text: Var,
    insts: &[&InstanceCondition],
    cfg: &ConditioningConfig,
) -> Result<Var> {
    let loc = location_features(ctx, f, insts, &cfg.location)?;
    let p = format!("tok.{}", f.name());
    let wt = ctx.p(&format!("{p}.text"))?;
    let wl = ctx.p(&format!("{p}.loc"))?;
    let b1 = ctx.p(&format!("{p}.b1"))?;
    let a = ctx.tape.matmul(text, wt)?;
    let c = ctx.tape.matmul(loc, wl)?;
    let h = ctx.tape.add(a, c)?;
    let h = ctx.tape.add_bias(h, b1)?;
    let h = ctx.tape.silu(h);
    ctx.linear(h, &format!("{p}.out"))
}

/// The four grounding tokens of every instance, in [`Format::ALL`] order.
pub fn tokenize_instances<T: Scalar>(
    ctx: &mut Ctx<T>,
    insts: &[&InstanceCondition],
    cfg: &ConditioningConfig,
) -> Result<[Var; 4]> {
    let caps: Vec<&CaptionTokens> = insts.iter().map(|i| &i.caption).collect();
    let text = encode_captions(ctx, &caps)?;
    let mut out = Vec::with_capacity(4);
    for f in Format::ALL {
        out.push(tokenize_format(ctx, f, text, insts, cfg)?);
    }
    Ok([out[0], out[1], out[2], out[3]])
}

/// One token per instance from its four format tokens:
/// `MLP(concat(g_mask, g_scribble, g_box, g_point))`.
pub fn joint_format_fuse<T: Scalar>(ctx: &mut Ctx<T>, g: [Var; 4]) -> Result<Var> {
    let mut h = None;
    for (f, gf) in Format::ALL.iter().zip(g) {
        let w = ctx.p(&format!("joint.{}", f.name()))?;
        let t = ctx.tape.matmul(gf, w)?;
        h = Some(match h {
            None => t,
            Some(acc) => ctx.tape.add(acc, t)?,
        });
    }
    let b1 = ctx.p("joint.b1")?;
    let h = ctx.tape.add_bias(h.unwrap(), b1)?;
    let h = ctx.tape.silu(h);
    ctx.linear(h, "joint.out")
}

/// Grounding tokens of a batch, padded to the largest instance count.
pub struct Grounding {
    /// `[B, slots, token_dim]`, or `None` when no layout has instances.
    pub tokens: Option<Var>,
    pub n_max: usize,
    pub per_instance: usize,
}

impl Grounding {
    pub fn slots(&self) -> usize {
        self.n_max * self.per_instance
    }
}

/// Slot `f * n_max + i` of batch item `b` holds instance `i`'s format-`f`
/// token; missing instances are zero rows (always masked out).
pub fn ground_batch<T: Scalar>(ctx: &mut Ctx<T>, layouts: &[&SceneLayout], cfg: &ConditioningConfig) -> Result<Grounding> {
    let k = cfg.tokens_per_instance();
    let n_max = layouts.iter().map(|l| l.len()).max().unwrap_or(0);
    let insts: Vec<&InstanceCondition> = layouts.iter().flat_map(|l| l.instances.iter()).collect();
    if insts.is_empty() {
        return Ok(Grounding {
            tokens: None,
            n_max: 0,
            per_instance: k,
        });
    }
    let total = insts.len();
    let g = tokenize_instances(ctx, &insts, cfg)?;
    let rows = if cfg.format_aware {
        let mut acc = ctx.tape.reshape(g[0], &[1, total, cfg.token_dim])?;
        for gf in &g[1..] {
            let r = ctx.tape.reshape(*gf, &[1, total, cfg.token_dim])?;
            acc = ctx.tape.concat_rows(acc, r)?;
        }
        ctx.tape.reshape(acc, &[4 * total, cfg.token_dim])?
    } else {
        joint_format_fuse(ctx, g)?
    };
    let mut idx = Vec::with_capacity(layouts.len() * k * n_max);
    let mut offset = 0;
    for l in layouts {
        for f in 0..k {
            for i in 0..n_max {
                idx.push((i < l.len()).then(|| f * total + offset + i));
            }
        }
        offset += l.len();
    }
    let t = ctx.tape.gather_rows(rows, &idx)?;
    let t = ctx.tape.reshape(t, &[layouts.len(), k * n_max, cfg.token_dim])?;
    Ok(Grounding {
        tokens: Some(t),
        n_max,
        per_instance: k,
    })
}

/// Instance membership of every visual token at one feature resolution.
/// Ids are 1-based; an empty set is the background (id 0).
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceIdMap {
    pub h: usize,
    pub w: usize,
    pub sets: Vec<Vec<usize>>,
    /// Instances that have a region (all formats null -> no region).
    pub active: Vec<bool>,
}

impl InstanceIdMap {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    fn member(&self, token: usize, i: usize) -> bool {
        self.sets[token].contains(&(i + 1))
    }

    fn visual_pair(&self, k: usize, j: usize) -> bool {
        let (a, b) = (&self.sets[k], &self.sets[j]);
        if a.is_empty() || b.is_empty() {
            return a.is_empty() && b.is_empty();
        }
        a.iter().any(|x| b.contains(x))
    }
}

/// Token `k` holds instance `i` iff its cell centre falls in `i`'s region.
pub fn build_instance_id_map(layout: &SceneLayout, fh: usize, fw: usize) -> InstanceIdMap {
    let regions: Vec<Option<Region>> = layout.instances.iter().map(|i| i.region()).collect();
    let mut sets = vec![Vec::new(); fh * fw];
    for (t, set) in sets.iter_mut().enumerate() {
        let c = [((t % fw) as f64 + 0.5) / fw as f64, ((t / fw) as f64 + 0.5) / fh as f64];
        for (i, r) in regions.iter().enumerate() {
            if r.as_ref().is_some_and(|r| r.contains(c)) {
                set.push(i + 1);
            }
        }
    }
    InstanceIdMap {
        h: fh,
        w: fw,
        sets,
        active: regions.iter().map(Option::is_some).collect(),
    }
}

/// Whether entry `(row, col)` of the attention over `m` visual tokens then
/// `k` blocks of `n_slots` grounding tokens is visible.
fn visible(idmap: &InstanceIdMap, n_slots: usize, masked: bool, row: usize, col: usize) -> bool {
    let m = idmap.tokens();
    let real = |slot: usize| {
        let i = slot % n_slots;
        i < idmap.active.len() && idmap.active[i]
    };
    match (row < m, col < m) {
        (true, true) => !masked || idmap.visual_pair(row, col),
        (true, false) => {
            let slot = col - m;
            real(slot) && (!masked || idmap.member(row, slot % n_slots))
        }
        (false, true) => {
            let slot = row - m;
            real(slot) && (!masked || idmap.member(col, slot % n_slots))
        }
        (false, false) => row == col,
    }
}

fn mask_value<T: Scalar>(vis: bool) -> T {
    if vis {
        T::zero()
    } else {
        T::neg_infinity()
    }
}

/// Full `(m + k n) x (m + k n)` additive mask (0 or -inf).
pub fn build_attention_mask<T: Scalar>(idmap: &InstanceIdMap, n: usize, k: usize, masked: bool) -> Tensor<T> {
    let l = idmap.tokens() + k * n;
    Tensor::from_fn(&[l, l], |e| mask_value(visible(idmap, n.max(1), masked, e / l, e % l)))
}

/// Visual-row block `[m, m + k n_slots]` of the mask.
pub fn visual_rows_mask<T: Scalar>(idmap: &InstanceIdMap, n_slots: usize, k: usize, masked: bool) -> Tensor<T> {
    let m = idmap.tokens();
    let l = m + k * n_slots;
    Tensor::from_fn(&[m, l], |e| mask_value(visible(idmap, n_slots.max(1), masked, e / l, e % l)))
}

/// Stacked visual-row masks for a batch, `[B, m, m + k n_max]`; `None` when
/// nothing is masked.
pub fn batch_mask<T: Scalar>(
    layouts: &[&SceneLayout],
    fh: usize,
    fw: usize,
    n_max: usize,
    k: usize,
    masked: bool,
) -> Result<Option<Tensor<T>>> {
    let mut parts = Vec::with_capacity(layouts.len());
    for l in layouts {
        let idmap = build_instance_id_map(l, fh, fw);
        parts.push(visual_rows_mask::<T>(&idmap, n_max, k, masked));
    }
    if parts.iter().all(|p| p.data().iter().all(|v| *v == T::zero())) {
        return Ok(None);
    }
    let m = fh * fw;
    let l = m + k * n_max;
    let mut data = Vec::with_capacity(layouts.len() * m * l);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Ok(Some(Tensor::new(&[layouts.len(), m, l], data)?))
}

/// Weights of one fusion site: projection of grounding tokens to `c`,
/// per-head q/k/v/o and the gate `omega` (zero).
pub fn build_unifusion<T: Scalar, R: Rng + ?Sized>(
    b: &mut Builder<T, R>,
    prefix: &str,
    c: usize,
    token_dim: usize,
    heads: usize,
) -> Result<()> {
    if heads == 0 || c % heads != 0 {
        return Err(dim_err!("{c} channels not divisible into {heads} heads"));
    }
    b.linear(&format!("{prefix}.proj"), token_dim, c)?;
    build_heads(b, prefix, c, c, heads)?;
    b.zeros(&format!("{prefix}.gate"), &[1])
}

fn build_heads<T: Scalar, R: Rng + ?Sized>(
    b: &mut Builder<T, R>,
    prefix: &str,
    c: usize,
    kv_in: usize,
    heads: usize,
) -> Result<()> {
    let dh = c / heads;
    for h in 0..heads {
        b.linear(&format!("{prefix}.q{h}"), c, dh)?;
        b.linear(&format!("{prefix}.k{h}"), kv_in, dh)?;
        b.linear(&format!("{prefix}.v{h}"), kv_in, dh)?;
        b.matrix(&format!("{prefix}.o{h}"), dh, c)?;
    }
    b.zeros(&format!("{prefix}.ob"), &[c])
}

pub fn build_cross_attention<T: Scalar, R: Rng + ?Sized>(
    b: &mut Builder<T, R>,
    prefix: &str,
    c: usize,
    text_dim: usize,
    heads: usize,
) -> Result<()> {
    if heads == 0 || c % heads != 0 {
        return Err(dim_err!("{c} channels not divisible into {heads} heads"));
    }
    build_heads(b, prefix, c, text_dim, heads)
}

/// Multi-head attention with queries `q_in [B, m, c]` over `kv [B, L, *]`;
/// heads are summed through their own output projections.
fn attend<T: Scalar>(
    ctx: &mut Ctx<T>,
    prefix: &str,
    q_in: Var,
    kv: Var,
    mask: Option<&Tensor<T>>,
    heads: usize,
) -> Result<Var> {
    let c = *ctx.tape.shape(q_in).last().unwrap();
    let dh = c / heads;
    let mut out = None;
    for h in 0..heads {
        let q = ctx.linear(q_in, &format!("{prefix}.q{h}"))?;
        let k = ctx.linear(kv, &format!("{prefix}.k{h}"))?;
        let v = ctx.linear(kv, &format!("{prefix}.v{h}"))?;
        let logits = ctx.tape.bmm(q, k, false, true)?;
        let logits = ctx.tape.scale(logits, 1.0 / (dh as f64).sqrt());
        let p = ctx.tape.masked_softmax(logits, mask)?;
        let o = ctx.tape.bmm(p, v, false, false)?;
        let wo = ctx.p(&format!("{prefix}.o{h}"))?;
        let o = ctx.tape.matmul(o, wo)?;
        out = Some(match out {
            None => o,
            Some(acc) => ctx.tape.add(acc, o)?,
        });
    }
    let ob = ctx.p(&format!("{prefix}.ob"))?;
    ctx.tape.add_bias(out.unwrap(), ob)
}

/// `V + tanh(omega) * SA([Xn, proj(G)])[:m]`, where `Xn` are the normalized
/// visual tokens and only visual rows are computed as queries.
pub fn unifusion_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    prefix: &str,
    v: Var,
    xn: Var,
    g: Option<Var>,
    mask: Option<&Tensor<T>>,
    heads: usize,
) -> Result<Var> {
    let keys = match g {
        Some(g) => {
            let gp = ctx.linear(g, &format!("{prefix}.proj"))?;
            ctx.tape.concat_rows(xn, gp)?
        }
        None => xn,
    };
    let o = attend(ctx, prefix, xn, keys, mask, heads)?;
    let omega = ctx.p(&format!("{prefix}.gate"))?;
    let gate = ctx.tape.tanh(omega);
    let o = ctx.tape.mul(o, gate)?;
    ctx.tape.add(v, o)
}

/// Plain residual cross-attention from visual tokens to caption tokens.
pub fn cross_attention<T: Scalar>(
    ctx: &mut Ctx<T>,
    prefix: &str,
    v: Var,
    xn: Var,
    text: Var,
    mask: Option<&Tensor<T>>,
    heads: usize,
) -> Result<Var> {
    let o = attend(ctx, prefix, xn, text, mask, heads)?;
    ctx.tape.add(v, o)
}

/// Per-token caption embeddings of a batch, `[B, L_max, text_dim]`, and the
/// padding mask `[B, m, L_max]` for `m` query tokens.
pub fn caption_tokens<T: Scalar>(
    ctx: &mut Ctx<T>,
    captions: &[&CaptionTokens],
    m: usize,
) -> Result<(Var, Option<Tensor<T>>)> {
    let table = ctx.p("text.embed")?;
    let l_max = captions.iter().map(|c| c.ids().len()).max().unwrap_or(1);
    let bags: Vec<Vec<usize>> = captions.iter().flat_map(|c| c.ids().iter().map(|&i| vec![i])).collect();
    let rows = ctx.tape.embed_bag(table, &bags)?;
    let mut idx = Vec::with_capacity(captions.len() * l_max);
    let mut off = 0;
    for c in captions {
        for j in 0..l_max {
            idx.push((j < c.ids().len()).then_some(off + j));
        }
        off += c.ids().len();
    }
    let d = ctx.tape.shape(rows)[1];
    let t = ctx.tape.gather_rows(rows, &idx)?;
    let t = ctx.tape.reshape(t, &[captions.len(), l_max, d])?;
    let mask = if captions.iter().all(|c| c.ids().len() == l_max) {
        None
    } else {
        let mut data = Vec::with_capacity(captions.len() * m * l_max);
        for c in captions {
            for _ in 0..m {
                for j in 0..l_max {
                    data.push(mask_value(j < c.ids().len()));
                }
            }
        }
        Some(Tensor::new(&[captions.len(), m, l_max], data)?)
    };
    Ok((t, mask))
}
