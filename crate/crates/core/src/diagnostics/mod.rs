//! Analysis suite over frozen weights and captured forward traces.
//!
//! Residual-stream magnitude traces and spike detection, step-up/step-down
//! block attribution, the SwiGLU quadratic form and its dominant eigenpair,
//! normalization effects, the first-token linear map, and attention-sink
//! scores.

mod attention;
mod normalization;
mod quadratic;
pub mod report;
mod sink;
mod trace;

pub use attention::{attention_forward, head_sum_check, vo_matrix, vocab_position_probe};
pub use normalization::{normalize, normalized_sparsity, rmsnorm_bound_check, spike_cosine_matrix};
pub use quadratic::{
    cosine, frobenius_profile, quadratic_form, quadratic_form_from, quadratic_value,
    shared_direction_similarity, silu_regime, silu_regime_stats, spectrum, swiglu_weights,
    top_eigenpair, EigenResult, QuadraticFormResult, RegimeStat, EIGEN_MAX_ITER, EIGEN_TOL,
};
pub use sink::{
    importance_scores, is_sink, sink_ratio, sink_report, HeadScores, SinkReport, ROW_SUM_TOL,
};
pub use trace::{
    detect_spikes, detect_step_blocks, intermediate_blocks, max_intermediate_magnitude,
    residual_trace, top_k, Located, MagnitudeTrace, SpikeReport, StepBlockReport, TokenRatios,
};
