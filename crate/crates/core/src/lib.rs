pub mod attention;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod sequence;
pub mod train;

pub use error::{Error, Result};
pub use numerics::Tensor;
pub use scalar::Scalar;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ClipModel32 = model::ClipModel<f32>;
pub type ClipModel64 = model::ClipModel<f64>;
