//! Deepfake detector built from a frozen vision transformer with trainable
//! mixture-of-experts low-rank and convolutional adapter layers, plus the
//! training and evaluation machinery around it.

pub mod adapter;
pub mod backbone;
pub mod bind;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffconv;
pub mod error;
pub mod gating;
pub mod gradcheck;
pub mod lora;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{Parameter, Tensor};
