//! ViT semantic segmentation with trainable token clustering and regeneration,
//! on a small tape-based autodiff engine.

pub mod autodiff;
pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pseudo;
pub mod regenerator;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations used by the command line and the experiments.
pub type Tensor = tensor::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type ParamStore = params::ParamStore<f64>;
/// Single-precision variants.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ParamStore32 = params::ParamStore<f32>;
