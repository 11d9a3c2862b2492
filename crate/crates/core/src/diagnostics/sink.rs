use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::tensor::Tensor;

/// Tolerance on attention row sums accepted by [`importance_scores`].
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Column means of a row-stochastic `[T × T]` attention matrix:
/// `α_k = (1/T) Σ_t A[t,k]`.
pub fn importance_scores(a: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = a.dims2()?;
    if rows != cols || rows == 0 {
        return Err(Error::Dimension(format!("attention map must be square, got {:?}", a.shape())));
    }
    let mut alpha = vec![0.0; cols];
    for r in 0..rows {
        let row = a.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Contract(format!("attention row {r} sums to {sum}, not 1")));
        }
        for (acc, p) in alpha.iter_mut().zip(row) {
            *acc += p;
        }
    }
    let t = rows as f64;
    alpha.iter_mut().for_each(|x| *x /= t);
    Ok(alpha)
}

/// Whether a head's largest first-half score `max_{k ≤ ⌊T/2⌋} α_k` exceeds `eps`.
pub fn is_sink(alpha: &[f64], eps: f64) -> bool {
    first_half_max(alpha) > eps
}

fn first_half_max(alpha: &[f64]) -> f64 {
    let half = (alpha.len() / 2).max(1).min(alpha.len());
    alpha[..half].iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Fraction of heads whose maximum first-half importance exceeds `eps`.
pub fn sink_ratio(maps: &[Tensor], eps: f64, seq_len: usize) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::Dimension("no attention maps".into()));
    }
    let mut flagged = 0usize;
    for a in maps {
        if a.shape() != [seq_len, seq_len] {
            return Err(Error::Dimension(format!(
                "attention map {:?} for evaluation length {seq_len}",
                a.shape()
            )));
        }
        if is_sink(&importance_scores(a)?, eps) {
            flagged += 1;
        }
    }
    Ok(flagged as f64 / maps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScores {
    /// 1-based block index.
    pub block: usize,
    /// 0-based head index within the block.
    pub head: usize,
    pub alpha: Vec<f64>,
    pub sink: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkReport {
    pub epsilon: f64,
    pub seq_len: usize,
    /// Number of sequences averaged.
    pub sequences: usize,
    /// Importance scores averaged over sequences; the sink flag is set when
    /// the averaged scores pass the criterion.
    pub heads: Vec<HeadScores>,
    /// Per-sequence sink ratio, averaged over sequences.
    pub sink_ratio: f64,
}

impl SinkReport {
    /// Largest first-position importance score over all heads.
    pub fn max_first_position(&self) -> f64 {
        self.heads.iter().map(|h| h.alpha[0]).fold(0.0, f64::max)
    }
}

/// Collect every attention head of every traced sequence into a report.
pub fn sink_report(traces: &[ForwardTrace], eps: f64) -> Result<SinkReport> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Dimension("no traces to score".into()))?;
    let seq_len = first.seq_len();
    let mut heads: Vec<HeadScores> = Vec::new();
    let mut ratio_sum = 0.0;
    for (s, tr) in traces.iter().enumerate() {
        if tr.seq_len() != seq_len {
            return Err(Error::Dimension(format!(
                "trace {s} has length {}, expected {seq_len}",
                tr.seq_len()
            )));
        }
        let mut maps = Vec::new();
        let mut slot = 0;
        for (b, block) in tr.attention.iter().enumerate() {
            let Some(block) = block else { continue };
            for (h, a) in block.iter().enumerate() {
                let alpha = importance_scores(a)?;
                if s == 0 {
                    heads.push(HeadScores {
                        block: b + 1,
                        head: h,
                        alpha,
                        sink: false,
                    });
                } else {
                    let acc = heads.get_mut(slot).ok_or_else(|| {
                        Error::Dimension(format!("trace {s} has more heads than trace 0"))
                    })?;
                    acc.alpha.iter_mut().zip(&alpha).for_each(|(a, b)| *a += b);
                }
                slot += 1;
                maps.push(a.clone());
            }
        }
        if slot != heads.len() {
            return Err(Error::Dimension(format!("trace {s} has {slot} heads, expected {}", heads.len())));
        }
        ratio_sum += sink_ratio(&maps, eps, seq_len)?;
    }
    let n = traces.len() as f64;
    for h in &mut heads {
        h.alpha.iter_mut().for_each(|a| *a /= n);
        h.sink = is_sink(&h.alpha, eps);
    }
    Ok(SinkReport {
        epsilon: eps,
        seq_len,
        sequences: traces.len(),
        heads,
        sink_ratio: ratio_sum / n,
    })
}
