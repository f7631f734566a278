//! Hierarchical transformer for sequences of event multisets.

pub mod error;
pub mod data;
pub mod numerics;
pub mod model;
pub mod eval;
pub mod train;
pub mod bench;

pub use error::{NestError, Result};

/// Double-precision model weights, used for gradient checks and training.
pub type Weights64 = model::ModelWeights<f64>;
/// Single-precision model weights, used for throughput measurement.
pub type Weights32 = model::ModelWeights<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Tape64 = numerics::Tape<f64>;
pub type Tape32 = numerics::Tape<f32>;
