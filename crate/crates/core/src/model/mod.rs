//! The decoder-only transformer and its architectural variants.
//!
//! Every ablation axis is a [`ModelConfig`] value. Weights live in
//! [`Parameters`]; the forward pass is recorded on a
//! [`Tape`](crate::tensor::Tape) and can capture every intermediate state in
//! a [`ForwardTrace`].

pub mod checkpoint;
mod config;
mod forward;
mod layers;
mod params;

pub use config::{BlockKind, FfnKind, GateKind, GateWidth, ModelConfig, NormKind};
pub use forward::{bind, forward, model_forward, ForwardTrace, ForwardVars, TraceVars};
pub use layers::{
    apply_norm, attention_block, dynamic_tanh, ffn_block, gate_apply, residual_block, rmsnorm,
    rope_apply, AttentionOut, ResidualOut, SeqLayout, RMS_EPS,
};
pub use params::{
    AttentionParams, BlockParams, FfnParams, FfnWeights, Norm, Parameters, DYT_ALPHA_INIT,
    INIT_STD,
};
