//! Joint pruning and quantization with a learnable dead-zone quantizer.
//!
//! The dead-zone of a symmetric scalar quantizer zeroes exactly the weights a
//! magnitude-pruning mask would remove. Making the dead-zone width (and
//! optionally the bit-width) a differentiable function of a per-layer
//! parameter lets sparsity and precision be learned by ordinary
//! backpropagation alongside the weights.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod metrics;
pub mod models;
pub mod pruning;
pub mod quantizers;
pub mod trainer;
pub mod verify;

pub use error::{CodeqError, Result};
