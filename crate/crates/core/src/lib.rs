//! Desk-scale laboratory for massive activations and attention sinks in
//! decoder-only transformers.
//!
//! The crate trains tiny language models under a range of architectural
//! variants (normalization placement, feed-forward design, attention gating,
//! head geometry) and measures them with a diagnostic suite: residual-stream
//! magnitude traces, step-up/step-down block detection, quadratic-form and
//! eigen analysis of SwiGLU blocks, and attention-sink ratios.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::{Tape, Tensor, Var};
