//! Locate massive weights in gated-FFN transformers, measure their
//! importance with zeroing/retaining attacks, and fine-tune toy models with
//! curriculum dropout on those weights (MacDrop).
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode autodiff tape
//! - [`model`]: decoder-only transformer (pre-LN, residual dropout, sandwich LN, MoE)
//! - [`checkpoint`]: safetensors-layout weight files, configs and token streams
//! - [`trace`]: per-layer state capture and magnitude statistics
//! - [`probe`]: massive layer / massive weight detection from the bos token
//! - [`attack`]: top-k zeroing and retaining
//! - [`eval`]: perplexity and multiple-choice log-likelihood accuracy
//! - [`train`]: LoRA adapters, curriculum schedules and the MacDrop step
//! - [`fixtures`]: planted models and synthetic corpora for tests and demos

pub mod attack;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod model;
pub mod probe;
pub mod tensor;
pub mod trace;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use model::{ModelConfig, ParameterStore};
pub use tensor::{DType, Scalar, Tensor};
