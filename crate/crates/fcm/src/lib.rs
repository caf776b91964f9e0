//! Desk-scale forgetful causal masking (FCM) for decoder-only language models.
//!
//! Pre-trains small causal transformers where a random subset of past tokens
//! is hidden from the attention context, and evaluates them with zero-/few-shot
//! log-likelihood scoring. Everything runs on a from-scratch f32 tensor tape,
//! single-threaded and bit-deterministic given a seed.

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod masking;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod tensor;
pub mod train;
