use super::config::ModelConfig;
use super::layers::{apply_norm, attention_block, ffn_block, residual_block, SeqLayout};
use super::params::{BlockParams, Parameters};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Every intermediate state of one single-sequence forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    /// `H₁ … H_{2L+1}`, each `[T × d_model]`; `residuals[0]` is the embedding.
    pub residuals: Vec<Tensor>,
    /// What block `i` added to the stream, `block_outputs[i-1]`.
    pub block_outputs: Vec<Tensor>,
    /// Input handed to each block's transformation.
    pub normalized_inputs: Vec<Tensor>,
    /// Per block: the per-head `[T × T]` attention matrices, `None` for
    /// feed-forward blocks.
    pub attention: Vec<Option<Vec<Tensor>>>,
    pub final_normed: Tensor,
    pub logits: Tensor,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.block_outputs.len()
    }

    /// Post-residual state after block `i` (1-based), i.e. `H_{i+1}`.
    pub fn post_block(&self, i: usize) -> &Tensor {
        &self.residuals[i]
    }
}

/// Tape handles for the states recorded during [`forward`].
#[derive(Debug, Clone)]
pub struct TraceVars {
    pub residuals: Vec<Var>,
    pub block_outputs: Vec<Var>,
    pub normalized_inputs: Vec<Var>,
    pub attention: Vec<Option<Var>>,
    pub final_normed: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logits: Var,
    pub trace: Option<TraceVars>,
}

/// Put stored weights on a tape, as trainable leaves or as constants.
pub fn bind(tape: &mut Tape, params: &Parameters, trainable: bool) -> Parameters<Var> {
    params.map(|_, t| tape.leaf(t.clone(), trainable))
}

/// Batched forward pass over `tokens.len() / seq_len` sequences laid out
/// back to back.
pub fn forward(
    tape: &mut Tape,
    params: &Parameters<Var>,
    cfg: &ModelConfig,
    tokens: &[usize],
    seq_len: usize,
    capture: bool,
) -> Result<ForwardVars> {
    if seq_len == 0 || tokens.len() % seq_len != 0 {
        return Err(Error::Dimension(format!(
            "{} tokens do not split into sequences of {seq_len}",
            tokens.len()
        )));
    }
    if seq_len > cfg.max_seq {
        return Err(Error::Context {
            len: seq_len,
            max: cfg.max_seq,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Vocab {
            id,
            vocab: cfg.vocab_size,
        });
    }
    let h1 = tape.gather(params.embedding, tokens)?;
    let layout = SeqLayout {
        seq_len,
        tokens,
        embedding_rows: h1,
    };
    let mut h = h1;
    let mut trace = capture.then(|| TraceVars {
        residuals: vec![h1],
        block_outputs: Vec::new(),
        normalized_inputs: Vec::new(),
        attention: Vec::new(),
        final_normed: h1,
    });
    for block in &params.blocks {
        let (step, heads) = match block {
            BlockParams::Attention(p) => {
                let mut heads = None;
                let step = residual_block(tape, h, p.in_norm.as_ref(), p.out_norm.as_ref(), |tape, x| {
                    let a = attention_block(tape, x, p, cfg, &layout)?;
                    heads = Some(a.heads);
                    Ok(a.out)
                })?;
                (step, heads)
            }
            BlockParams::FeedForward(p) => {
                let step = residual_block(tape, h, p.in_norm.as_ref(), p.out_norm.as_ref(), |tape, x| {
                    ffn_block(tape, x, &p.weights)
                })?;
                (step, None)
            }
        };
        h = step.post;
        if let Some(tr) = trace.as_mut() {
            tr.residuals.push(step.post);
            tr.block_outputs.push(step.contribution);
            tr.normalized_inputs.push(step.normalized_input);
            tr.attention.push(heads);
        }
    }
    let normed = apply_norm(tape, h, &params.final_norm)?;
    let logits = tape.matmul(normed, params.head)?;
    if let Some(tr) = trace.as_mut() {
        tr.final_normed = normed;
    }
    Ok(ForwardVars { logits, trace })
}

/// Single-sequence forward pass on stored weights (no gradients). With
/// `capture`, every intermediate state is copied into a [`ForwardTrace`].
pub fn model_forward(
    tokens: &[usize],
    params: &Parameters,
    cfg: &ModelConfig,
    capture: bool,
) -> Result<(Tensor, Option<ForwardTrace>)> {
    if tokens.is_empty() {
        return Err(Error::Dimension("empty token sequence".into()));
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false);
    let out = forward(&mut tape, &bound, cfg, tokens, tokens.len(), capture)?;
    let logits = tape.value(out.logits).clone();
    let trace = out.trace.map(|tr| {
        let t = tokens.len();
        let grab = |v: &Var| tape.value(*v).clone();
        let attention = tr
            .attention
            .iter()
            .map(|a| {
                a.map(|v| {
                    let probs = tape.attention_probs(v).expect("attention node");
                    probs
                        .chunks(t * t)
                        .map(|c| Tensor::new(vec![t, t], c.to_vec()).expect("square head"))
                        .collect()
                })
            })
            .collect();
        ForwardTrace {
            tokens: tokens.to_vec(),
            residuals: tr.residuals.iter().map(grab).collect(),
            block_outputs: tr.block_outputs.iter().map(grab).collect(),
            normalized_inputs: tr.normalized_inputs.iter().map(grab).collect(),
            attention,
            final_normed: grab(&tr.final_normed),
            logits: logits.clone(),
        }
    });
    Ok((logits, trace))
}
