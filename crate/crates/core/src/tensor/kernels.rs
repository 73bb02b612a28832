//! Slice-level compute kernels behind the tape ops.

use crate::scalar::Scalar;

pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the image already is its column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Group statistics `(mean, 1/sqrt(var+eps))` for one `[C, S]` sample.
pub(crate) fn group_stats<T: Scalar>(x: &[T], groups: usize, eps: f64) -> Vec<(f64, f64)> {
    let per = x.len() / groups;
    (0..groups)
        .map(|g| {
            let xs = &x[g * per..(g + 1) * per];
            let n = per as f64;
            let mean = xs.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
            let var = xs
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap() - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

/// Row-wise softmax of `x + mask` in place; returns the first row whose
/// entries are all masked, if any.
pub(crate) fn softmax_rows<T: Scalar>(x: &mut [T], mask: Option<&[T]>, len: usize) -> Option<usize> {
    for (r, row) in x.chunks_mut(len).enumerate() {
        let mrow = mask.map(|m| &m[r * len..(r + 1) * len]);
        let mut max = f64::NEG_INFINITY;
        for (i, v) in row.iter().enumerate() {
            let mv = mrow.map_or(0.0, |m| m[i].to_f64().unwrap());
            let z = v.to_f64().unwrap() + mv;
            if z > max {
                max = z;
            }
        }
        if max == f64::NEG_INFINITY {
            return Some(r);
        }
        let mut sum = 0.0f64;
        let mut buf = Vec::with_capacity(len);
        for (i, v) in row.iter().enumerate() {
            let mv = mrow.map_or(0.0, |m| m[i].to_f64().unwrap());
            let e = if mv == f64::NEG_INFINITY {
                0.0
            } else {
                (v.to_f64().unwrap() + mv - max).exp()
            };
            sum += e;
            buf.push(e);
        }
        for (v, e) in row.iter_mut().zip(buf) {
            *v = T::lit(e / sum);
        }
    }
    None
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
