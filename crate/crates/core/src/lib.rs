//! Few-shot semantic segmentation with word-embedding conditioned, stacked,
//! gated co-attention: episodic data handling, model, metrics, and training.

pub mod autograd;
pub mod checkpoint;
pub mod coattention;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod rng;
pub mod semantics;
pub mod stacker;
pub mod scalar;
pub mod synth;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision tensor, the training default.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used for gradient verification.
pub type Tensor64 = Tensor<f64>;
