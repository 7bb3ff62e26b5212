//! Retinal vessel segmentation with stationary-wavelet inputs and a fully
//! convolutional encoder-decoder trained from scratch.
//!
//! Numeric types are generic over [`Real`] (`f32` or `f64`); the aliases
//! below name the concrete instantiations.

pub mod error;
pub mod eval;
pub mod imageio;
pub mod network;
pub mod patches;
pub mod predict;
pub mod scalar;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Plane64 = imageio::Plane<f64>;
pub type Plane32 = imageio::Plane<f32>;
pub type Tensor64 = network::Tensor<f64>;
pub type Tensor32 = network::Tensor<f32>;
pub type ParamSet64 = network::ParamSet<f64>;
pub type ParamSet32 = network::ParamSet<f32>;
pub type InputStack64 = wavelet::InputStack<f64>;
pub type InputStack32 = wavelet::InputStack<f32>;
