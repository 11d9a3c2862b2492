//! Next-token training: loss masking, schedule, AdamW and the run loop.

mod optim;
mod run;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub use optim::{adamw_step, adamw_update, clip_global_norm, global_norm, OptimizerState};
pub use run::{evaluate_nll, loss_and_grads, train_run, StepMetrics, TrainData, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    /// `(β₁, β₂)`
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global L2-norm cap on the gradient.
    pub grad_clip: f64,
    pub batch_tokens: usize,
    pub seq_len: usize,
    /// First position (1-based, inclusive) that contributes to the loss.
    pub loss_pos_min: usize,
    /// Last position (1-based, inclusive) that contributes to the loss.
    pub loss_pos_max: usize,
    pub seed: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_checkpoint_every() -> usize {
    500
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            min_lr_ratio: 0.1,
            warmup_steps: 200,
            total_steps: 2000,
            weight_decay: 0.1,
            betas: (0.9, 0.95),
            eps: 1e-8,
            grad_clip: 1.0,
            batch_tokens: 8192,
            seq_len: 64,
            loss_pos_min: 1,
            loss_pos_max: 64,
            seed: 0,
            checkpoint_every: default_checkpoint_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.seq_len < 2 {
            return bad(format!("train.seq_len must be at least 2, got {}", self.seq_len));
        }
        if !(1 <= self.loss_pos_min && self.loss_pos_min <= self.loss_pos_max && self.loss_pos_max <= self.seq_len) {
            return bad(format!(
                "train loss positions [{}, {}] must satisfy 1 <= min <= max <= seq_len = {}",
                self.loss_pos_min, self.loss_pos_max, self.seq_len
            ));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "train.warmup_steps {} exceeds train.total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_tokens < self.seq_len {
            return bad(format!(
                "train.batch_tokens {} is smaller than one sequence of {}",
                self.batch_tokens, self.seq_len
            ));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("train.betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        let nonneg = [
            ("base_lr", self.base_lr),
            ("min_lr_ratio", self.min_lr_ratio),
            ("weight_decay", self.weight_decay),
            ("eps", self.eps),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("train.{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return bad(format!("train.grad_clip must be positive, got {}", self.grad_clip));
        }
        if self.checkpoint_every == 0 {
            return bad("train.checkpoint_every must be positive".into());
        }
        Ok(())
    }

    /// Sequences per optimizer step.
    pub fn batch_size(&self) -> usize {
        self.batch_tokens / self.seq_len
    }

    pub fn pos_range(&self) -> (usize, usize) {
        (self.loss_pos_min, self.loss_pos_max)
    }
}

/// Linear warmup to `base_lr`, then cosine decay to `min_lr_ratio·base_lr`
/// at `total_steps`.
pub fn lr_at_step(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    let progress = if span == 0 {
        1.0
    } else {
        (step - cfg.warmup_steps) as f64 / span as f64
    };
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.base_lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine)
}

/// Per-row loss weights for a batch of sequences: `1/n` inside the 1-based
/// inclusive position range, where `n` counts every weighted row, and exactly
/// zero outside it.
pub fn position_weights(batch: usize, seq_len: usize, pos_range: (usize, usize)) -> Result<Vec<f64>> {
    let (lo, hi) = pos_range;
    if lo == 0 || lo > hi || hi > seq_len {
        return Err(Error::Config(format!(
            "loss position range [{lo}, {hi}] is empty or outside [1, {seq_len}]"
        )));
    }
    let w = 1.0 / (batch * (hi - lo + 1)) as f64;
    Ok((0..batch * seq_len)
        .map(|r| {
            let pos = r % seq_len + 1;
            if (lo..=hi).contains(&pos) {
                w
            } else {
                0.0
            }
        })
        .collect())
}

/// Mean next-token NLL over the positions in `pos_range`, recorded on the
/// tape. `logits` holds `targets.len() / seq_len` sequences back to back.
pub fn masked_nll(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    seq_len: usize,
    pos_range: (usize, usize),
) -> Result<Var> {
    if seq_len == 0 || targets.len() % seq_len != 0 {
        return Err(Error::Dimension(format!(
            "{} targets do not split into sequences of {seq_len}",
            targets.len()
        )));
    }
    let weights = position_weights(targets.len() / seq_len, seq_len, pos_range)?;
    tape.cross_entropy(logits, targets, &weights)
}

/// Masked NLL of one `[T × |V|]` logit matrix, as a plain scalar tensor.
pub fn masked_nll_loss(logits: &Tensor, targets: &[usize], pos_range: (usize, usize)) -> Result<Tensor> {
    let (rows, _) = logits.dims2()?;
    if targets.len() != rows {
        return Err(Error::Dimension(format!("{rows} logit rows but {} targets", targets.len())));
    }
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let loss = masked_nll(&mut tape, z, targets, rows, pos_range)?;
    Ok(tape.value(loss).clone())
}
