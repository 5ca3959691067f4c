//! Stochastic image quality transfer for low-field MRI.
//!
//! A forward simulator degrades high-field volumes into synthetic low-field
//! volumes with random tissue contrast; an anisotropic U-Net trained on
//! matched patches restores slice resolution and contrast.

pub mod acceptance;
pub mod autodiff;
pub mod error;
pub mod metrics;
pub mod network;
pub mod normalizer;
pub mod oracles;
pub mod patching;
pub mod pipeline;
pub mod scalar;
pub mod simulator;
pub mod training;
pub mod volume;

pub use error::{IqtError, Result};
pub use scalar::Scalar;

/// Volumes used by the simulator, normaliser and metrics.
pub type Volume = volume::Volume3D<f64>;
pub type Masks = volume::TissueMasks<f64>;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
