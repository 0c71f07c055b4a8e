//! Spatial-then-temporal self-supervised video correspondence at desk scale.

pub mod archive;
pub mod checkpoint;
pub mod config;
pub mod correlation;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod propagation;
pub mod spatial;
pub mod temporal;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
