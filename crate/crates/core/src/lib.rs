//! Explainability-aware structured pruning for small vision transformers.
//!
//! The pipeline has three phases:
//!
//! 1. train class-conditional masks on a frozen baseline ([`mask`]),
//! 2. learn per-layer thresholds and pruning rates under a global parameter
//!    budget ([`prune`]),
//! 3. remove the low-scoring heads and neurons, fold the surviving masks into
//!    the weights and fine-tune.
//!
//! Everything runs on a small tape-based autodiff engine ([`autodiff`]) over
//! `f64` tensors.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod mask;
pub mod meter;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod prune;
pub mod train;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
