//! N-best reranking for knowledge-distillation pseudo-labels.
//!
//! The crate turns teacher n-best lists into pseudo-labels: it builds a
//! per-hypothesis feature matrix ([`features`]), tunes log-linear weights with
//! batch k-best MIRA against tune-set BLEU ([`mira`]), reranks and selects a
//! sparse model subset ([`rerank`]), emits labels by several strategies
//! ([`distill`]) and drives iterative self-training with external hooks
//! ([`pipeline`]).

pub mod corpus;
pub mod distill;
pub mod error;
pub mod features;
pub mod metrics;
pub mod mira;
pub mod pipeline;
pub mod rerank;

pub use error::{Error, Result};
