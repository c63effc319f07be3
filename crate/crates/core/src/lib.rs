//! Illumination-invariant quadruple prior, a pixel-space toy diffusion
//! enhancer conditioned on it, and a bypass-decoder autoencoder.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod audit;
pub mod bypass;
pub mod checkpoint;
pub mod diffusion;
pub mod distortion;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod prior;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod toymodel;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ImageF = image::Image<f32>;
pub type ImageD = image::Image<f64>;
pub type TensorF = nn::Tensor<f32>;
pub type TensorD = nn::Tensor<f64>;
pub type QuadPriorF = prior::QuadPrior<f32>;
pub type QuadPriorD = prior::QuadPrior<f64>;
pub type ConvNetF = toymodel::ConvNet<f32>;
pub type ConvNetD = toymodel::ConvNet<f64>;
pub type ToyAeF = bypass::ToyAe<f32>;
pub type ToyAeD = bypass::ToyAe<f64>;
