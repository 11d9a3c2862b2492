//! Block-level building blocks, recorded on a [`Tape`].

use super::config::{GateKind, GateWidth, ModelConfig};
use super::params::{AttentionParams, FfnWeights, Norm};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, UnaryKind, Var};

/// Added to `‖h‖²` as `eps²` inside the RMSNorm square root.
pub const RMS_EPS: f64 = 1e-8;

/// Row-structured inputs shared by every block of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SeqLayout<'a> {
    pub seq_len: usize,
    /// Flattened token ids, one per row.
    pub tokens: &'a [usize],
    /// Raw token embedding rows (`H₁`), used by token-conditioned gates.
    pub embedding_rows: Var,
}

pub fn apply_norm(tape: &mut Tape, x: Var, norm: &Norm<Var>) -> Result<Var> {
    match norm {
        Norm::Rms { scale } => {
            let width = tape.shape(*scale)[0];
            tape.rmsnorm(x, Some(*scale), width, RMS_EPS)
        }
        Norm::DynTanh { alpha, gamma, beta } => tape.dyn_tanh(x, *alpha, *gamma, *beta),
    }
}

/// Row-wise `√d · h/‖h‖ ⊙ scale` on plain tensors.
pub fn rmsnorm(h: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let s = tape.constant(scale.clone());
    let width = scale.numel();
    let y = tape.rmsnorm(x, Some(s), width, RMS_EPS)?;
    Ok(tape.value(y).clone())
}

/// Elementwise `γ ⊙ tanh(α·h) + β` on plain tensors.
pub fn dynamic_tanh(h: &Tensor, alpha: f64, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let a = tape.constant(Tensor::new(vec![1], vec![alpha])?);
    let g = tape.constant(gamma.clone());
    let b = tape.constant(beta.clone());
    let y = tape.dyn_tanh(x, a, g, b)?;
    Ok(tape.value(y).clone())
}

/// Rotate the rows of a `[T × d_head]` query or key matrix by position.
pub fn rope_apply(x: &Tensor, base: f64) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.rope(v, rows.max(1), cols, base)?;
    Ok(tape.value(y).clone())
}

/// Output of [`attention_block`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionOut {
    /// Block output `F_attn`, before any output normalization.
    pub out: Var,
    /// The attention node; its saved probabilities are the per-head `A^(h)`.
    pub heads: Var,
}

/// Multi-head causal attention over an already-normalized input `x`
/// (`[batch·T × d_model]`). Under `sandwich_qk`, `x` is the raw residual
/// stream and the per-head query/key norms in `p` are applied after
/// projection and before the rotary embedding.
pub fn attention_block(
    tape: &mut Tape,
    x: Var,
    p: &AttentionParams<Var>,
    cfg: &ModelConfig,
    layout: &SeqLayout<'_>,
) -> Result<AttentionOut> {
    if layout.seq_len > cfg.max_seq {
        return Err(Error::Context {
            len: layout.seq_len,
            max: cfg.max_seq,
        });
    }
    let mut q = tape.matmul(x, p.w_q)?;
    let mut k = tape.matmul(x, p.w_k)?;
    let v = tape.matmul(x, p.w_v)?;
    if let Some(s) = p.q_norm {
        q = tape.rmsnorm(q, Some(s), cfg.d_head, RMS_EPS)?;
    }
    if let Some(s) = p.k_norm {
        k = tape.rmsnorm(k, Some(s), cfg.d_head, RMS_EPS)?;
    }
    let q = tape.rope(q, layout.seq_len, cfg.d_head, cfg.rope_base)?;
    let k = tape.rope(k, layout.seq_len, cfg.d_head, cfg.rope_base)?;
    let heads = tape.causal_attention(q, k, v, layout.seq_len, cfg.n_heads, cfg.d_head)?;
    let mixed = match p.gate {
        Some(g) => gate_apply(tape, heads, x, g, cfg, layout)?,
        None => heads,
    };
    let out = tape.matmul(mixed, p.w_o)?;
    Ok(AttentionOut { out, heads })
}

/// Multiply concatenated head outputs (`[rows × heads·d_head]`) by sigmoid
/// gates. Conditional gates read the block input `normed`; unconditional
/// gates are learned logits; static gates read a learned positional table or
/// the raw token embedding.
pub fn gate_apply(
    tape: &mut Tape,
    head_outputs: Var,
    normed: Var,
    gate: Var,
    cfg: &ModelConfig,
    layout: &SeqLayout<'_>,
) -> Result<Var> {
    let rows = tape.shape(head_outputs)[0];
    let pre = match cfg.gate_kind {
        GateKind::None => return Err(Error::Config("gate weights present without a gate kind".into())),
        GateKind::CondChannel | GateKind::CondHead | GateKind::CondSingle => {
            tape.matmul(normed, gate)?
        }
        GateKind::UncondChannel | GateKind::UncondHead | GateKind::UncondSingle => {
            tape.broadcast_rows(gate, rows)?
        }
        GateKind::StaticPositional => {
            let positions: Vec<usize> = (0..rows).map(|r| r % layout.seq_len).collect();
            tape.gather(gate, &positions)?
        }
        GateKind::StaticToken => tape.matmul(layout.embedding_rows, gate)?,
    };
    let g = tape.unary(pre, UnaryKind::Sigmoid);
    let expanded = match cfg.gate_kind.width() {
        Some(GateWidth::Channel) | None => g,
        Some(GateWidth::Head) => tape.repeat_cols(g, cfg.d_head)?,
        Some(GateWidth::Single) => tape.repeat_cols(g, cfg.attn_width())?,
    };
    tape.mul(head_outputs, expanded)
}

/// Position-wise feed-forward map of an already-normalized input.
pub fn ffn_block(tape: &mut Tape, x: Var, weights: &FfnWeights<Var>) -> Result<Var> {
    match weights {
        FfnWeights::Swiglu { w_gate, w_up, w_down } => {
            let a = tape.matmul_nt(x, *w_gate)?;
            let u = tape.matmul_nt(x, *w_up)?;
            let s = tape.unary(a, UnaryKind::Silu);
            let m = tape.mul(s, u)?;
            tape.matmul_nt(m, *w_down)
        }
        FfnWeights::Gelu2 { w_up, w_down } => {
            let u = tape.matmul_nt(x, *w_up)?;
            let g = tape.unary(u, UnaryKind::Gelu);
            tape.matmul_nt(g, *w_down)
        }
        FfnWeights::Linear { w } => tape.matmul_nt(x, *w),
    }
}

/// Output of [`residual_block`].
#[derive(Debug, Clone, Copy)]
pub struct ResidualOut {
    /// `H_{i+1}`
    pub post: Var,
    /// What was added to the stream (`F` after any output norm).
    pub contribution: Var,
    /// Input handed to `F`.
    pub normalized_input: Var,
}

/// `h + out_norm(F(in_norm(h)))`, with either norm optional.
pub fn residual_block<F>(
    tape: &mut Tape,
    h: Var,
    in_norm: Option<&Norm<Var>>,
    out_norm: Option<&Norm<Var>>,
    block_fn: F,
) -> Result<ResidualOut>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let normalized_input = match in_norm {
        Some(n) => apply_norm(tape, h, n)?,
        None => h,
    };
    let fx = block_fn(tape, normalized_input)?;
    let contribution = match out_norm {
        Some(n) => apply_norm(tape, fx, n)?,
        None => fx,
    };
    let post = tape.add(h, contribution)?;
    Ok(ResidualOut {
        post,
        contribution,
        normalized_input,
    })
}
