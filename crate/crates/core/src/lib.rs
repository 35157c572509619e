//! Few-shot tabular learning guided by a task-level knowledge vector read
//! from a language model's hidden states.
//!
//! Pipeline: rows are embedded feature by feature with name semantics
//! ([`embed`]), refined by a position-free transformer ([`encoder`]), fused
//! with the projected knowledge vector ([`adapter`]), pretrained on unlabeled
//! rows with clustering pseudo-labels ([`pretrain`]) and fine-tuned on a few
//! labeled rows ([`finetune`]). [`eval`] holds metrics and the experiment
//! runner.

pub mod adapter;
pub mod config;
pub mod data;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod finetune;
pub mod model;
pub mod nn;
pub mod pretrain;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
