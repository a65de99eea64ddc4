//! Wavelet-guided residual diffusion for 4× single-image super-resolution.
//!
//! The crate holds the numerical core: Haar transforms, the residual DDPM,
//! sparse dynamic-focus attention, a small reverse-mode autodiff engine, the
//! two networks, the pre-upsampler and the quality metrics. Kernels run on
//! rayon when the `parallel` feature is on (the default).

pub mod attention;
pub mod autograd;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod presr;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Mask, Matrix, Tensor};
