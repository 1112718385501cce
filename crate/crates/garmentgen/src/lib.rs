//! Two-stage conditional diffusion for fine-grained garment synthesis,
//! trained and evaluated end-to-end on a procedurally generated
//! mini-benchmark.
//!
//! Stage I (global appearance) denoises a garment latent under text,
//! silhouette, and color conditioning; stage II (local enhancement) injects
//! a logo at a masked location by denoising a width-concatenated
//! garment|logo latent. All numeric kernels are generic over the scalar
//! type; `f32` is the training default and `f64` backs the gradient checks.

pub mod attention;
pub mod encoders;
pub mod error;
pub mod global_model;
pub mod graph;
pub mod local_model;
pub mod nn;
pub mod num;
pub mod schedule;
pub mod tensor;
pub mod unet;

pub use error::{GarmentError, Result};
pub use num::Scalar;

/// Training/inference default scalar.
pub type F32 = f32;
/// Gradient-check / oracle scalar.
pub type F64 = f64;

pub type Latent32 = tensor::Latent<f32>;
pub type Latent64 = tensor::Latent<f64>;
pub type Image32 = tensor::ImageTensor<f32>;
pub type Image64 = tensor::ImageTensor<f64>;
pub type Mask32 = tensor::MaskTensor<f32>;
pub type Mask64 = tensor::MaskTensor<f64>;
pub type Features32 = tensor::FeatureSequence<f32>;
pub type Features64 = tensor::FeatureSequence<f64>;
