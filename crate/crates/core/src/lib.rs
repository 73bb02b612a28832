//! Instance-conditioned pixel-space diffusion.
//!
//! Every instance in a scene carries its own short caption and a location
//! given as a point, scribble, box or mask. Locations become grounding tokens
//! that are fused into a small UNet denoiser through instance-masked
//! attention with a gated residual; decoder skips are re-weighted in the
//! Fourier domain; sampling supports per-instance latent averaging.
//!
//! Numerics are generic over [`Scalar`] (`f32` for models, `f64` for
//! gradient checks). Concrete aliases are exported below.

pub mod conditioning;
pub mod error;
pub mod layout;
pub mod locations;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod scalar;
pub mod scaleu;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ComplexTensor, Gradients, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
