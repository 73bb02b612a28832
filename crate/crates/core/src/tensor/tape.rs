//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and enough context to
//! push gradients back to its inputs. The tape is rebuilt for each forward
//! pass; [`Tape::backward`] replays it in reverse insertion order, which is a
//! valid topological order because inputs always precede outputs.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::fft::spectral_filter;
use crate::tensor::kernels::{col2im, group_stats, im2col, sigmoid, softmax_rows, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Same,
    Scalar,
    /// `[C]` over `[B, C, ...]`, or `[B, C]` over `[B, C, ...]`.
    Channel { c: usize, inner: usize, per_batch: bool },
    /// `[D]` over `[..., D]`.
    Last { d: usize },
}

impl Bcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Channel {
                c,
                inner,
                per_batch,
            } => {
                if per_batch {
                    i / inner
                } else {
                    (i / inner) % c
                }
            }
            Bcast::Last { d } => i % d,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnKind {
    Silu,
    Tanh,
    Scale(f64),
    Offset(f64),
    Square,
}

#[derive(Clone, Copy, Debug)]
struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    b_batched: bool,
}

impl MatDims {
    fn a_strides(&self) -> (isize, isize) {
        if self.ta {
            (1, self.m as isize)
        } else {
            (self.k as isize, 1)
        }
    }

    fn b_strides(&self) -> (isize, isize) {
        if self.tb {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }

    fn b_offset(&self, bi: usize) -> usize {
        if self.b_batched {
            bi * self.k * self.n
        } else {
            0
        }
    }
}

enum Op {
    Leaf,
    Reshape(Var),
    MatMul(Var, Var, MatDims),
    Conv2d {
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        stats: Vec<(f64, f64)>,
    },
    Binary(Var, Var, BinKind, Bcast),
    Unary(Var, UnKind),
    MaskedSoftmax(Var, usize),
    Spectral {
        x: Var,
        s: Var,
        lowpass: Vec<bool>,
        h: usize,
        w: usize,
    },
    ConcatChannels(Var, Var),
    ConcatRows(Var, Var),
    ToTokens(Var),
    FromTokens(Var),
    Upsample2x(Var),
    EmbedBag(Var, Vec<Vec<usize>>),
    GatherRows(Var, Vec<Option<usize>>),
    BlendRows {
        x: Var,
        fill: Var,
        keep: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Gradient tape. Confined to one thread; build one per forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; zeros when `v` is not on any path to the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Gradient of `v` if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: &[usize], add: impl FnOnce(&mut [T])) {
    let g = slot.get_or_insert_with(|| Tensor::zeros(shape));
    add(g.data_mut());
}

impl<T: Scalar> Tape<T> {
    /// A tape that records ops for differentiation.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that only evaluates; `backward` yields nothing.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    // ---------------------------------------------------------------- matmul

    /// `[m, k] @ [k, n]`. Leading axes of `a` are flattened into rows when
    /// `a` has rank > 2, which makes this the dense-layer product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.len() < 2 {
            return Err(dim_err!("matmul expects [.., k] x [k, n], got {sa:?} x {sb:?}"));
        }
        let k = *sa.last().unwrap();
        if k != sb[0] {
            return Err(dim_err!("matmul inner dims {sa:?} x {sb:?}"));
        }
        let m = sa[..sa.len() - 1].iter().product();
        let dims = MatDims {
            batch: 1,
            m,
            k,
            n: sb[1],
            ta: false,
            tb: false,
            b_batched: false,
        };
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(sb[1]);
        self.matmul_impl(a, b, dims, &out_shape)
    }

    /// Batched product of rank-3 operands, optionally transposing either
    /// operand's trailing two axes: `op(a)[B, m, k] @ op(b)[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err!("bmm expects [B, _, _] operands, got {sa:?} x {sb:?}"));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(dim_err!("bmm inner dims {sa:?} x {sb:?} (ta={ta}, tb={tb})"));
        }
        let dims = MatDims {
            batch: sa[0],
            m,
            k,
            n,
            ta,
            tb,
            b_batched: true,
        };
        self.matmul_impl(a, b, dims, &[sa[0], m, n])
    }

    fn matmul_impl(&mut self, a: Var, b: Var, d: MatDims, out_shape: &[usize]) -> Result<Var> {
        let mut out = vec![T::zero(); d.batch * d.m * d.n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for bi in 0..d.batch {
                T::gemm(
                    d.m,
                    d.k,
                    d.n,
                    T::one(),
                    &av[bi * d.m * d.k..],
                    d.a_strides(),
                    &bv[d.b_offset(bi)..],
                    d.b_strides(),
                    T::zero(),
                    &mut out[bi * d.m * d.n..],
                    (d.n as isize, 1),
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b, d), &[a, b]))
    }

    // ------------------------------------------------------------------ conv

    /// Cross-correlation of `x[B, C, H, W]` with `w[O, C, kh, kw]` plus `bias[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(bias).to_vec(),
        );
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(dim_err!("conv2d shapes x={sx:?} w={sw:?} bias={sb:?}"));
        }
        let geom = conv_geom(&sx, &sw, stride, pad)?;
        let (batch, o) = (sx[0], sw[0]);
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); batch * o * p];
        {
            let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(bias).data());
            let mut cols = if geom.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); rows * p]
            };
            let img = geom.c * geom.h * geom.w;
            for bi in 0..batch {
                let xb = &xv[bi * img..(bi + 1) * img];
                let colm: &[T] = if geom.is_pointwise() {
                    xb
                } else {
                    im2col(xb, &geom, &mut cols);
                    &cols
                };
                let ob = &mut out[bi * o * p..(bi + 1) * o * p];
                for (oc, line) in ob.chunks_mut(p).enumerate() {
                    line.fill(bv[oc]);
                }
                T::gemm(o, rows, p, T::one(), wv, (rows as isize, 1), colm, (p as isize, 1), T::one(), ob, (p as isize, 1));
            }
        }
        let value = Tensor::new(&[batch, o, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            &[x, w, bias],
        ))
    }

    // ------------------------------------------------------------ group norm

    /// Group normalization over `x[B, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || groups == 0 || sx[1] % groups != 0 {
            return Err(dim_err!("group_norm: {groups} groups do not divide channels of {sx:?}"));
        }
        let c = sx[1];
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(dim_err!("group_norm affine must be [{c}]"));
        }
        let inner: usize = sx[2..].iter().product();
        let sample = c * inner;
        let per_group = sample / groups;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut stats = Vec::with_capacity(sx[0] * groups);
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..sx[0] {
            let st = group_stats(&xv[bi * sample..(bi + 1) * sample], groups, eps);
            for (g, &(mean, rstd)) in st.iter().enumerate() {
                for j in 0..per_group {
                    let i = bi * sample + g * per_group + j;
                    let ch = (g * per_group + j) / inner;
                    let xhat = (xv[i].to_f64().unwrap() - mean) * rstd;
                    out[i] = T::lit(xhat) * gv[ch] + bv[ch];
                }
            }
            stats.extend(st);
        }
        let value = Tensor::new(&sx, out)?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                stats,
            },
            &[x, gain, bias],
        ))
    }

    // ------------------------------------------------------------ elementwise

    fn binary(&mut self, a: Var, b: Var, kind: BinKind, bc: Bcast) -> Result<Var> {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[bc.index(i)];
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        Ok(self.push(value, Op::Binary(a, b, kind, bc), &[a, b]))
    }

    fn same_or_scalar(&self, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if self.value(b).numel() == 1 {
            Ok(Bcast::Scalar)
        } else {
            Err(dim_err!("cannot broadcast {sb:?} onto {sa:?}"))
        }
    }

    fn channel(&self, x: Var, v: Var) -> Result<Bcast> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sx.len() < 2 {
            return Err(dim_err!("channel broadcast needs [B, C, ...], got {sx:?}"));
        }
        let c = sx[1];
        let inner = sx[2..].iter().product();
        if sv == [c] {
            Ok(Bcast::Channel {
                c,
                inner,
                per_batch: false,
            })
        } else if sv == [sx[0], c] {
            Ok(Bcast::Channel {
                c,
                inner,
                per_batch: true,
            })
        } else {
            Err(dim_err!("channel vector {sv:?} does not fit {sx:?}"))
        }
    }

    /// `a + b` with `b` of equal shape or a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.same_or_scalar(a, b)?;
        self.binary(a, b, BinKind::Add, bc)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.same_or_scalar(a, b)?;
        self.binary(a, b, BinKind::Sub, bc)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.same_or_scalar(a, b)?;
        self.binary(a, b, BinKind::Mul, bc)
    }

    /// Adds a `[C]` or `[B, C]` vector over the spatial axes of `x[B, C, ...]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let bc = self.channel(x, v)?;
        self.binary(x, v, BinKind::Add, bc)
    }

    /// Multiplies `x[B, C, ...]` by a `[C]` or `[B, C]` vector.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let bc = self.channel(x, v)?;
        self.binary(x, v, BinKind::Mul, bc)
    }

    /// Adds a `[D]` bias along the trailing axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(b) != [d] {
            return Err(dim_err!("bias {:?} does not fit {:?}", self.shape(b), self.shape(x)));
        }
        self.binary(x, b, BinKind::Add, Bcast::Last { d })
    }

    fn unary(&mut self, x: Var, kind: UnKind) -> Var {
        let value = self.value(x).map(|v| match kind {
            UnKind::Silu => {
                let f = v.to_f64().unwrap();
                T::lit(f * sigmoid(f))
            }
            UnKind::Tanh => v.tanh(),
            UnKind::Scale(c) => v * T::lit(c),
            UnKind::Offset(c) => v + T::lit(c),
            UnKind::Square => v * v,
        });
        self.push(value, Op::Unary(x, kind), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, UnKind::Silu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, UnKind::Tanh)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, UnKind::Scale(c))
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, UnKind::Offset(c))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, UnKind::Square)
    }

    // --------------------------------------------------------------- softmax

    /// Softmax over the trailing axis of `x + mask`, where `mask` holds `0`
    /// or `-inf` and has the same shape as `x`. Masked entries get exactly 0.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if let Some(m) = mask {
            if m.shape() != sx.as_slice() {
                return Err(dim_err!("mask {:?} vs logits {sx:?}", m.shape()));
            }
        }
        let len = *sx.last().unwrap();
        let mut out = self.value(x).data().to_vec();
        if let Some(row) = softmax_rows(&mut out, mask.map(|m| m.data()), len) {
            return Err(Error::DegenerateRow { row });
        }
        let value = Tensor::new(&sx, out)?;
        Ok(self.push(value, Op::MaskedSoftmax(x, len), &[x]))
    }

    // -------------------------------------------------------------- spectral

    /// `Re(IFFT(FFT(x) * alpha))` per channel of `x[B, C, H, W]`, where
    /// `alpha = tanh(s[c]) + 1` on bins flagged in `lowpass[H*W]` and 1
    /// elsewhere. Errors if the imaginary residue exceeds `1e-5`.
    pub fn spectral_scale(&mut self, x: Var, s: Var, lowpass: &[bool]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || self.shape(s) != [sx[1]] || lowpass.len() != sx[2] * sx[3] {
            return Err(dim_err!("spectral_scale x={sx:?} s={:?}", self.shape(s)));
        }
        let (c, h, w) = (sx[1], sx[2], sx[3]);
        if !super::is_pow2(h) || !super::is_pow2(w) {
            return Err(dim_err!("spectral_scale needs power-of-two H, W; got {h}x{w}"));
        }
        // A real output (and the self-adjoint backward) needs a mask that is
        // symmetric under k -> -k.
        for bin in 0..h * w {
            let (y, x) = (bin / w, bin % w);
            let mirror = ((h - y) % h) * w + (w - x) % w;
            if lowpass[bin] != lowpass[mirror] {
                return Err(Error::Contract(format!("frequency mask not symmetric at bin {bin}")));
            }
        }
        let t: Vec<f64> = self
            .value(s)
            .data()
            .iter()
            .map(|v| v.to_f64().unwrap().tanh())
            .collect();
        let (out, residue) = spectral_filter(self.value(x).data(), sx[0] * c, h, w, |p, bin| {
            if lowpass[bin] {
                t[p % c] + 1.0
            } else {
                1.0
            }
        })?;
        if residue > 1e-5 {
            return Err(Error::Numerical(format!(
                "spectral_scale imaginary residue {residue:e}"
            )));
        }
        let value = Tensor::new(&sx, out)?;
        Ok(self.push(
            value,
            Op::Spectral {
                x,
                s,
                lowpass: lowpass.to_vec(),
                h,
                w,
            },
            &[x, s],
        ))
    }

    // ---------------------------------------------------------------- layout

    /// `[B, Ca, H, W] ++ [B, Cb, H, W] -> [B, Ca+Cb, H, W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(dim_err!("concat_channels {sa:?} ++ {sb:?}"));
        }
        let value = concat_axis1(self.value(a), self.value(b));
        Ok(self.push(value, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// `[B, m, d] ++ [B, k, d] -> [B, m+k, d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(dim_err!("concat_rows {sa:?} ++ {sb:?}"));
        }
        let value = concat_axis1(self.value(a), self.value(b));
        Ok(self.push(value, Op::ConcatRows(a, b), &[a, b]))
    }

    /// `[B, C, H, W] -> [B, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(dim_err!("to_tokens expects [B, C, H, W], got {sx:?}"));
        }
        let (b, c, s) = (sx[0], sx[1], sx[2] * sx[3]);
        let value = Tensor::new(&[b, s, c], transpose_inner(self.value(x).data(), b, c, s))?;
        Ok(self.push(value, Op::ToTokens(x), &[x]))
    }

    /// `[B, H*W, C] -> [B, C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[1] != h * w {
            return Err(dim_err!("from_tokens {sx:?} into {h}x{w}"));
        }
        let (b, s, c) = (sx[0], sx[1], sx[2]);
        let value = Tensor::new(&[b, c, h, w], transpose_inner(self.value(x).data(), b, s, c))?;
        Ok(self.push(value, Op::FromTokens(x), &[x]))
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(dim_err!("upsample2x expects rank 4, got {sx:?}"));
        }
        let (h, w) = (sx[2], sx[3]);
        let planes = sx[0] * sx[1];
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[sx[0], sx[1], 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x(x), &[x]))
    }

    /// Mean of embedding-table rows per bag: `table[V, d] -> [bags, d]`.
    pub fn embed_bag(&mut self, table: Var, bags: &[Vec<usize>]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(dim_err!("embedding table must be [V, d], got {st:?}"));
        }
        let (v, d) = (st[0], st[1]);
        let tv = self.value(table).data();
        let mut out = vec![T::zero(); bags.len() * d];
        for (r, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::Contract("empty embedding bag".into()));
            }
            let inv = 1.0 / bag.len() as f64;
            for j in 0..d {
                let mut acc = 0.0f64;
                for &id in bag {
                    if id >= v {
                        return Err(Error::Vocabulary(format!("id {id} >= table size {v}")));
                    }
                    acc += tv[id * d + j].to_f64().unwrap();
                }
                out[r * d + j] = T::lit(acc * inv);
            }
        }
        let value = Tensor::new(&[bags.len(), d], out)?;
        Ok(self.push(value, Op::EmbedBag(table, bags.to_vec()), &[table]))
    }

    /// Picks rows of `x[N, d]`: `out[r] = x[idx[r]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || idx.is_empty() {
            return Err(dim_err!("gather_rows expects [N, d] and indices, got {sx:?}"));
        }
        let (n, d) = (sx[0], sx[1]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); idx.len() * d];
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= n {
                    return Err(dim_err!("gather index {i} out of {n} rows"));
                }
                out[r * d..(r + 1) * d].copy_from_slice(&xv[i * d..(i + 1) * d]);
            }
        }
        let value = Tensor::new(&[idx.len(), d], out)?;
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// `out[i] = keep[i] * x[i] + (1 - keep[i]) * fill` for rows of `x[N, d]`
    /// and a shared `fill[d]`.
    pub fn blend_rows(&mut self, x: Var, fill: Var, keep: &[f64]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] != keep.len() || self.shape(fill) != [sx[1]] {
            return Err(dim_err!(
                "blend_rows x={sx:?} fill={:?} keep={}",
                self.shape(fill),
                keep.len()
            ));
        }
        let d = sx[1];
        let (xv, fv) = (self.value(x).data(), self.value(fill).data());
        let out: Vec<T> = (0..xv.len())
            .map(|i| {
                let s = T::lit(keep[i / d]);
                s * xv[i] + (T::one() - s) * fv[i % d]
            })
            .collect();
        let value = Tensor::new(&sx, out)?;
        Ok(self.push(
            value,
            Op::BlendRows {
                x,
                fill,
                keep: keep.to_vec(),
            },
            &[x, fill],
        ))
    }

    // ------------------------------------------------------------- reduction

    pub fn sum(&mut self, x: Var) -> Var {
        let s = crate::scalar::sum_f64(self.value(x).data());
        self.push(Tensor::scalar(T::lit(s)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = crate::scalar::sum_f64(v.data()) / v.numel() as f64;
        self.push(Tensor::scalar(T::lit(s)), Op::Mean(x), &[x])
    }

    // -------------------------------------------------------------- backward

    /// Reverse replay from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        let shape_of = |v: Var| self.nodes[v.0].value.shape().to_vec();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Reshape(x) => {
                let sx = shape_of(*x);
                accumulate(&mut grads[x.0], &sx, |dx| add_into(dx, gd));
            }
            Op::MatMul(a, b, d) => {
                let d = *d;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let sa = shape_of(*a);
                    accumulate(&mut grads[a.0], &sa, |da| {
                        for bi in 0..d.batch {
                            let gb = &gd[bi * d.m * d.n..];
                            let bb = &bv[d.b_offset(bi)..];
                            let dab = &mut da[bi * d.m * d.k..];
                            // d op(A) = G @ op(B)^T, written into A's layout.
                            let (bs0, bs1) = d.b_strides();
                            let da_strides = if d.ta { (1, d.m as isize) } else { (d.k as isize, 1) };
                            T::gemm(d.m, d.n, d.k, T::one(), gb, (d.n as isize, 1), bb, (bs1, bs0), T::one(), dab, da_strides);
                        }
                    });
                }
                if self.wants(*b) {
                    let sb = shape_of(*b);
                    accumulate(&mut grads[b.0], &sb, |db| {
                        for bi in 0..d.batch {
                            let gb = &gd[bi * d.m * d.n..];
                            let ab = &av[bi * d.m * d.k..];
                            let dbb = &mut db[d.b_offset(bi)..];
                            // d op(B) = op(A)^T @ G
                            let (as0, as1) = d.a_strides();
                            let db_strides = if d.tb { (1, d.k as isize) } else { (d.n as isize, 1) };
                            T::gemm(d.k, d.m, d.n, T::one(), ab, (as1, as0), gb, (d.n as isize, 1), T::one(), dbb, db_strides);
                        }
                    });
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let (sx, sw) = (shape_of(*x), shape_of(*w));
                let geom = conv_geom(&sx, &sw, *stride, *pad)?;
                let (batch, o) = (sx[0], sw[0]);
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                let img = geom.c * geom.h * geom.w;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if self.wants(*bias) {
                    accumulate(&mut grads[bias.0], &[o], |db| {
                        for bi in 0..batch {
                            for oc in 0..o {
                                let s: f64 = gd[(bi * o + oc) * p..(bi * o + oc + 1) * p]
                                    .iter()
                                    .map(|v| v.to_f64().unwrap())
                                    .sum();
                                db[oc] += T::lit(s);
                            }
                        }
                    });
                }
                let mut cols = if geom.is_pointwise() {
                    Vec::new()
                } else {
                    vec![T::zero(); rows * p]
                };
                if self.wants(*w) {
                    accumulate(&mut grads[w.0], &sw, |dw| {
                        for bi in 0..batch {
                            let xb = &xv[bi * img..(bi + 1) * img];
                            let colm: &[T] = if geom.is_pointwise() {
                                xb
                            } else {
                                im2col(xb, &geom, &mut cols);
                                &cols
                            };
                            let gb = &gd[bi * o * p..(bi + 1) * o * p];
                            T::gemm(o, p, rows, T::one(), gb, (p as isize, 1), colm, (1, p as isize), T::one(), dw, (rows as isize, 1));
                        }
                    });
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], &sx, |dx| {
                        let mut dcols = vec![T::zero(); rows * p];
                        for bi in 0..batch {
                            let gb = &gd[bi * o * p..(bi + 1) * o * p];
                            let dxb = &mut dx[bi * img..(bi + 1) * img];
                            if geom.is_pointwise() {
                                T::gemm(rows, o, p, T::one(), wv, (1, rows as isize), gb, (p as isize, 1), T::one(), dxb, (p as isize, 1));
                            } else {
                                T::gemm(rows, o, p, T::one(), wv, (1, rows as isize), gb, (p as isize, 1), T::zero(), &mut dcols, (p as isize, 1));
                                col2im(&dcols, &geom, dxb);
                            }
                        }
                    });
                }
            }
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                stats,
            } => {
                let sx = shape_of(*x);
                let c = sx[1];
                let inner: usize = sx[2..].iter().product();
                let sample = c * inner;
                let per_group = sample / groups;
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let xhat = |bi: usize, i: usize| {
                    let (mean, rstd) = stats[bi * groups + (i % sample) / per_group];
                    (xv[i].to_f64().unwrap() - mean) * rstd
                };
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dgain = vec![0.0f64; c];
                    let mut dbias = vec![0.0f64; c];
                    for i in 0..xv.len() {
                        let bi = i / sample;
                        let ch = (i % sample) / inner;
                        let gi = gd[i].to_f64().unwrap();
                        dgain[ch] += gi * xhat(bi, i);
                        dbias[ch] += gi;
                    }
                    if self.wants(*gain) {
                        accumulate(&mut grads[gain.0], &[c], |d| add_f64_into(d, &dgain));
                    }
                    if self.wants(*bias) {
                        accumulate(&mut grads[bias.0], &[c], |d| add_f64_into(d, &dbias));
                    }
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], &sx, |dx| {
                        for bi in 0..sx[0] {
                            for gr in 0..*groups {
                                let start = bi * sample + gr * per_group;
                                let rstd = stats[bi * groups + gr].1;
                                let mut m1 = 0.0f64;
                                let mut m2 = 0.0f64;
                                for i in start..start + per_group {
                                    let ch = (i % sample) / inner;
                                    let dxh = gd[i].to_f64().unwrap() * gv[ch].to_f64().unwrap();
                                    m1 += dxh;
                                    m2 += dxh * xhat(bi, i);
                                }
                                m1 /= per_group as f64;
                                m2 /= per_group as f64;
                                for i in start..start + per_group {
                                    let ch = (i % sample) / inner;
                                    let dxh = gd[i].to_f64().unwrap() * gv[ch].to_f64().unwrap();
                                    dx[i] += T::lit(rstd * (dxh - m1 - xhat(bi, i) * m2));
                                }
                            }
                        }
                    });
                }
            }
            Op::Binary(a, b, kind, bc) => {
                let (a, b, kind, bc) = (*a, *b, *kind, *bc);
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let sa = shape_of(a);
                    accumulate(&mut grads[a.0], &sa, |da| match kind {
                        BinKind::Add | BinKind::Sub => add_into(da, gd),
                        BinKind::Mul => {
                            for (i, d) in da.iter_mut().enumerate() {
                                *d += gd[i] * bv[bc.index(i)];
                            }
                        }
                    });
                }
                if self.wants(b) {
                    let sb = shape_of(b);
                    let mut acc = vec![0.0f64; bv.len()];
                    for i in 0..gd.len() {
                        let gi = gd[i].to_f64().unwrap();
                        let contrib = match kind {
                            BinKind::Add => gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * av[i].to_f64().unwrap(),
                        };
                        acc[bc.index(i)] += contrib;
                    }
                    accumulate(&mut grads[b.0], &sb, |db| add_f64_into(db, &acc));
                }
            }
            Op::Unary(x, kind) => {
                let sx = shape_of(*x);
                let xv = self.value(*x).data();
                let yv = self.nodes[idx].value.data();
                accumulate(&mut grads[x.0], &sx, |dx| {
                    for i in 0..dx.len() {
                        let local = match kind {
                            UnKind::Silu => {
                                let f = xv[i].to_f64().unwrap();
                                let s = sigmoid(f);
                                T::lit(s * (1.0 + f * (1.0 - s)))
                            }
                            UnKind::Tanh => T::one() - yv[i] * yv[i],
                            UnKind::Scale(c) => T::lit(*c),
                            UnKind::Offset(_) => T::one(),
                            UnKind::Square => T::lit(2.0) * xv[i],
                        };
                        dx[i] += gd[i] * local;
                    }
                });
            }
            Op::MaskedSoftmax(x, len) => {
                let sx = shape_of(*x);
                let yv = self.nodes[idx].value.data();
                accumulate(&mut grads[x.0], &sx, |dx| {
                    for r in 0..yv.len() / len {
                        let row = r * len..(r + 1) * len;
                        let dot: f64 = yv[row.clone()]
                            .iter()
                            .zip(&gd[row.clone()])
                            .map(|(y, g)| y.to_f64().unwrap() * g.to_f64().unwrap())
                            .sum();
                        for i in row {
                            let y = yv[i].to_f64().unwrap();
                            dx[i] += T::lit(y * (gd[i].to_f64().unwrap() - dot));
                        }
                    }
                });
            }
            Op::Spectral {
                x,
                s,
                lowpass,
                h,
                w,
            } => {
                let sx = shape_of(*x);
                let c = sx[1];
                let planes = sx[0] * c;
                let t: Vec<f64> = self
                    .value(*s)
                    .data()
                    .iter()
                    .map(|v| v.to_f64().unwrap().tanh())
                    .collect();
                if self.wants(*x) {
                    // The radial mask is symmetric under k -> -k, so the
                    // filter is self-adjoint on real signals.
                    let (dxv, _) = spectral_filter(gd, planes, *h, *w, |p, bin| {
                        if lowpass[bin] {
                            t[p % c] + 1.0
                        } else {
                            1.0
                        }
                    })?;
                    accumulate(&mut grads[x.0], &sx, |dx| add_into(dx, &dxv));
                }
                if self.wants(*s) {
                    let (lp, _) = spectral_filter(self.value(*x).data(), planes, *h, *w, |_, bin| {
                        if lowpass[bin] {
                            1.0
                        } else {
                            0.0
                        }
                    })?;
                    let hw = h * w;
                    let mut acc = vec![0.0f64; c];
                    for (i, l) in lp.iter().enumerate() {
                        let ch = (i / hw) % c;
                        acc[ch] += gd[i].to_f64().unwrap() * l.to_f64().unwrap();
                    }
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a *= 1.0 - t[ch] * t[ch];
                    }
                    accumulate(&mut grads[s.0], &[c], |ds| add_f64_into(ds, &acc));
                }
            }
            Op::ConcatChannels(a, b) | Op::ConcatRows(a, b) => {
                let (sa, sb) = (shape_of(*a), shape_of(*b));
                let outer = sa[0];
                let (ca, cb) = (inner_len(&sa), inner_len(&sb));
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], &sa, |da| {
                        for o in 0..outer {
                            add_into(&mut da[o * ca..(o + 1) * ca], &gd[o * (ca + cb)..o * (ca + cb) + ca]);
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], &sb, |db| {
                        for o in 0..outer {
                            add_into(&mut db[o * cb..(o + 1) * cb], &gd[o * (ca + cb) + ca..(o + 1) * (ca + cb)]);
                        }
                    });
                }
            }
            Op::ToTokens(x) => {
                let sx = shape_of(*x);
                let (b, c, s) = (sx[0], sx[1], sx[2] * sx[3]);
                let back = transpose_inner(gd, b, s, c);
                accumulate(&mut grads[x.0], &sx, |dx| add_into(dx, &back));
            }
            Op::FromTokens(x) => {
                let sx = shape_of(*x);
                let (b, s, c) = (sx[0], sx[1], sx[2]);
                let back = transpose_inner(gd, b, c, s);
                accumulate(&mut grads[x.0], &sx, |dx| add_into(dx, &back));
            }
            Op::Upsample2x(x) => {
                let sx = shape_of(*x);
                let (h, w) = (sx[2], sx[3]);
                accumulate(&mut grads[x.0], &sx, |dx| {
                    for p in 0..sx[0] * sx[1] {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[p * h * w + (y / 2) * w + xx / 2] += gd[p * 4 * h * w + y * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::EmbedBag(table, bags) => {
                let st = shape_of(*table);
                let d = st[1];
                let mut acc = vec![0.0f64; st[0] * d];
                for (r, bag) in bags.iter().enumerate() {
                    let inv = 1.0 / bag.len() as f64;
                    for &id in bag {
                        for j in 0..d {
                            acc[id * d + j] += gd[r * d + j].to_f64().unwrap() * inv;
                        }
                    }
                }
                accumulate(&mut grads[table.0], &st, |dt| add_f64_into(dt, &acc));
            }
            Op::GatherRows(x, idx) => {
                let sx = shape_of(*x);
                let d = sx[1];
                accumulate(&mut grads[x.0], &sx, |dx| {
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            for j in 0..d {
                                dx[i * d + j] += gd[r * d + j];
                            }
                        }
                    }
                });
            }
            Op::BlendRows { x, fill, keep } => {
                let sx = shape_of(*x);
                let d = sx[1];
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], &sx, |dx| {
                        for i in 0..dx.len() {
                            dx[i] += gd[i] * T::lit(keep[i / d]);
                        }
                    });
                }
                if self.wants(*fill) {
                    let mut acc = vec![0.0f64; d];
                    for i in 0..gd.len() {
                        acc[i % d] += gd[i].to_f64().unwrap() * (1.0 - keep[i / d]);
                    }
                    accumulate(&mut grads[fill.0], &[d], |df| add_f64_into(df, &acc));
                }
            }
            Op::Sum(x) => {
                let sx = shape_of(*x);
                let g0 = gd[0];
                accumulate(&mut grads[x.0], &sx, |dx| dx.iter_mut().for_each(|v| *v += g0));
            }
            Op::Mean(x) => {
                let sx = shape_of(*x);
                let n = self.value(*x).numel() as f64;
                let g0 = T::lit(gd[0].to_f64().unwrap() / n);
                accumulate(&mut grads[x.0], &sx, |dx| dx.iter_mut().for_each(|v| *v += g0));
            }
        }
        Ok(())
    }
}

fn conv_geom(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let (h, w, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
    if stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(dim_err!("conv2d kernel {kh}x{kw} does not fit {h}x{w} with pad {pad}"));
    }
    let (ph, pw) = (h + 2 * pad - kh, w + 2 * pad - kw);
    if ph % stride != 0 || pw % stride != 0 {
        return Err(dim_err!(
            "conv2d output size is not integral: ({h}+2*{pad}-{kh})/{stride}"
        ));
    }
    Ok(ConvGeom {
        c: sx[1],
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        oh: ph / stride + 1,
        ow: pw / stride + 1,
    })
}

fn inner_len(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

fn concat_axis1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    let (ia, ib) = (inner_len(sa), inner_len(sb));
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for o in 0..sa[0] {
        data.extend_from_slice(&a.data()[o * ia..(o + 1) * ia]);
        data.extend_from_slice(&b.data()[o * ib..(o + 1) * ib]);
    }
    let mut shape = sa.to_vec();
    shape[1] += sb[1];
    Tensor::new(&shape, data).expect("concat shape")
}

/// Per batch, transposes a `[r, c]` block into `[c, r]`.
fn transpose_inner<T: Scalar>(x: &[T], batch: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let src = &x[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn add_f64_into<T: Scalar>(dst: &mut [T], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += T::lit(*s);
    }
}
