//! Radix-2 2-D FFT over the two trailing axes.
//!
//! Convention: the forward transform is unnormalized and the inverse carries
//! the `1/(H*W)` factor, so `ifft2(fft2(x)) == x`. Butterflies run in `f64`
//! whatever the storage type.

use std::f64::consts::PI;

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Complex tensor stored as split real/imaginary planes of equal shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor<T> {
    shape: Vec<usize>,
    re: Vec<T>,
    im: Vec<T>,
}

impl<T: Scalar> ComplexTensor<T> {
    pub fn new(shape: &[usize], re: Vec<T>, im: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if re.len() != numel || im.len() != numel {
            return Err(dim_err!(
                "complex planes {}/{} do not match shape {shape:?}",
                re.len(),
                im.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            re,
            im,
        })
    }

    pub fn from_real(x: &Tensor<T>) -> Self {
        Self {
            shape: x.shape().to_vec(),
            re: x.data().to_vec(),
            im: vec![T::zero(); x.numel()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn re(&self) -> &[T] {
        &self.re
    }

    pub fn im(&self) -> &[T] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [T] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [T] {
        &mut self.im
    }

    /// Largest `|imag|` over all bins.
    pub fn max_imag(&self) -> T {
        self.im.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Drops the imaginary plane after checking that it is negligible
    /// (`<= tol * max(1, max|re|)`).
    pub fn into_real(self, tol: f64) -> Result<Tensor<T>> {
        let scale = self
            .re
            .iter()
            .fold(1.0f64, |m, v| m.max(v.to_f64().unwrap_or(f64::NAN).abs()));
        let residue = self.max_imag().to_f64().unwrap_or(f64::NAN);
        if !(residue <= tol * scale) {
            return Err(Error::Numerical(format!(
                "imaginary residue {residue:e} exceeds {:e}",
                tol * scale
            )));
        }
        Tensor::new(&self.shape, self.re)
    }
}

pub fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

fn plane_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(dim_err!("fft2 needs at least 2 axes, got {shape:?}"));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    if !is_pow2(h) || !is_pow2(w) {
        return Err(dim_err!("fft2 needs power-of-two H, W; got {h}x{w}"));
    }
    let planes = shape[..shape.len() - 2].iter().product();
    Ok((planes, h, w))
}

/// In-place iterative radix-2 transform of one complex line.
struct Line {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Line {
    fn new(n: usize) -> Self {
        let half = n / 2;
        let (cos, sin) = (0..half)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .unzip();
        Self { n, cos, sin }
    }

    fn run(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let n = self.n;
        let mut j = 0;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut len = 2;
        while len <= n {
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..len / 2 {
                    let (wr, wi) = (self.cos[k * step], sign * self.sin[k * step]);
                    let (a, b) = (start + k, start + k + len / 2);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }
}

fn transform_planes(re: &mut [f64], im: &mut [f64], planes: usize, h: usize, w: usize, inverse: bool) {
    let row = Line::new(w);
    let col = Line::new(h);
    let mut cr = vec![0.0; h];
    let mut ci = vec![0.0; h];
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            let s = base + y * w;
            row.run(&mut re[s..s + w], &mut im[s..s + w], inverse);
        }
        for x in 0..w {
            for y in 0..h {
                cr[y] = re[base + y * w + x];
                ci[y] = im[base + y * w + x];
            }
            col.run(&mut cr, &mut ci, inverse);
            for y in 0..h {
                re[base + y * w + x] = cr[y];
                im[base + y * w + x] = ci[y];
            }
        }
    }
    if inverse {
        let norm = 1.0 / (h * w) as f64;
        re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= norm);
    }
}

fn to_f64<T: Scalar>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
}

fn from_f64<T: Scalar>(xs: Vec<f64>) -> Vec<T> {
    xs.into_iter().map(T::lit).collect()
}

/// Unnormalized forward 2-D DFT over the trailing `H x W` axes.
pub fn fft2<T: Scalar>(x: &Tensor<T>) -> Result<ComplexTensor<T>> {
    let (planes, h, w) = plane_dims(x.shape())?;
    let mut re = to_f64(x.data());
    let mut im = vec![0.0; re.len()];
    transform_planes(&mut re, &mut im, planes, h, w, false);
    ComplexTensor::new(x.shape(), from_f64(re), from_f64(im))
}

/// Complex forward transform; used when the input already has an imaginary part.
pub fn fft2_complex<T: Scalar>(x: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    let (planes, h, w) = plane_dims(x.shape())?;
    let mut re = to_f64(x.re());
    let mut im = to_f64(x.im());
    transform_planes(&mut re, &mut im, planes, h, w, false);
    ComplexTensor::new(x.shape(), from_f64(re), from_f64(im))
}

/// Inverse transform with `1/(H*W)` normalization, complex output.
pub fn ifft2_complex<T: Scalar>(x: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    let (planes, h, w) = plane_dims(x.shape())?;
    let mut re = to_f64(x.re());
    let mut im = to_f64(x.im());
    transform_planes(&mut re, &mut im, planes, h, w, true);
    ComplexTensor::new(x.shape(), from_f64(re), from_f64(im))
}

/// Inverse transform of a spectrum known to come from a real signal.
/// Fails if the imaginary residue exceeds `1e-5` (relative to the signal scale).
pub fn ifft2<T: Scalar>(x: &ComplexTensor<T>) -> Result<Tensor<T>> {
    ifft2_complex(x)?.into_real(1e-5)
}

/// Real-valued linear spectral filter `Re(IFFT(FFT(x) * gain))` with a real,
/// per-plane gain map of shape `[planes, H, W]`; computed in `f64`.
pub(crate) fn spectral_filter<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    gain: impl Fn(usize, usize) -> f64,
) -> Result<(Vec<T>, f64)> {
    let mut re = to_f64(x);
    let mut im = vec![0.0; re.len()];
    transform_planes(&mut re, &mut im, planes, h, w, false);
    for p in 0..planes {
        for bin in 0..h * w {
            let g = gain(p, bin);
            re[p * h * w + bin] *= g;
            im[p * h * w + bin] *= g;
        }
    }
    transform_planes(&mut re, &mut im, planes, h, w, true);
    let scale = re.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let residue = im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((from_f64(re), residue / scale))
}
