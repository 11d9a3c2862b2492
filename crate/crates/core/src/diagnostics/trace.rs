use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::tensor::Tensor;

/// One absolute coordinate magnitude and where it sits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Located {
    pub magnitude: f64,
    pub token: usize,
    pub channel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeTrace {
    pub k: usize,
    /// Top-k of `|H_i|` for `H₁` (the embedding) and after each block.
    pub post_residual: Vec<Vec<Located>>,
    /// Top-k of `|F_i|` for each block.
    pub block_outputs: Vec<Vec<Located>>,
    /// Cell holding the largest post-block magnitude.
    pub peak: Option<(usize, usize)>,
    /// Signed value of the peak cell before the first block.
    pub peak_initial: f64,
    /// Signed value of the peak cell after each block.
    pub peak_series: Vec<f64>,
}

impl MagnitudeTrace {
    /// Trace for a single planted channel series (post-block values), with a
    /// zero starting value.
    pub fn from_channel_series(series: &[f64]) -> Self {
        let peak = series
            .iter()
            .enumerate()
            .fold(None::<(usize, f64)>, |best, (i, v)| match best {
                Some((_, b)) if b >= v.abs() => best,
                _ => Some((i, v.abs())),
            });
        let cell = |m: f64| {
            vec![Located {
                magnitude: m.abs(),
                token: 0,
                channel: 0,
            }]
        };
        let mut prev = 0.0;
        let mut outputs = Vec::new();
        for &v in series {
            outputs.push(cell(v - prev));
            prev = v;
        }
        MagnitudeTrace {
            k: 1,
            post_residual: std::iter::once(cell(0.0)).chain(series.iter().map(|&v| cell(v))).collect(),
            block_outputs: outputs,
            peak: peak.map(|_| (0, 0)),
            peak_initial: 0.0,
            peak_series: series.to_vec(),
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.block_outputs.len()
    }
}

/// The `k` largest `|x|` cells of a `[T × d]` state. Ties go to the lower
/// channel, then the lower token.
pub fn top_k(x: &Tensor, k: usize) -> Result<Vec<Located>> {
    let (_, cols) = x.dims2()?;
    let mut cells: Vec<Located> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| Located {
            magnitude: v.abs(),
            token: i / cols,
            channel: i % cols,
        })
        .collect();
    cells.sort_by(|a, b| {
        b.magnitude
            .total_cmp(&a.magnitude)
            .then(a.channel.cmp(&b.channel))
            .then(a.token.cmp(&b.token))
    });
    cells.truncate(k);
    Ok(cells)
}

pub fn residual_trace(trace: &ForwardTrace, k: usize) -> Result<MagnitudeTrace> {
    let post_residual = trace
        .residuals
        .iter()
        .map(|h| top_k(h, k))
        .collect::<Result<Vec<_>>>()?;
    let block_outputs = trace
        .block_outputs
        .iter()
        .map(|f| top_k(f, k))
        .collect::<Result<Vec<_>>>()?;
    let mut peak: Option<Located> = None;
    for h in &trace.residuals[1..] {
        if let Some(&top) = top_k(h, 1)?.first() {
            if peak.is_none_or(|p| top.magnitude > p.magnitude) {
                peak = Some(top);
            }
        }
    }
    let (peak_initial, peak_series) = match peak {
        Some(p) => {
            let d = trace.residuals[0].shape()[1];
            let at = |h: &Tensor| h.data()[p.token * d + p.channel];
            (
                at(&trace.residuals[0]),
                trace.residuals[1..].iter().map(at).collect(),
            )
        }
        None => (0.0, Vec::new()),
    };
    Ok(MagnitudeTrace {
        k,
        post_residual,
        block_outputs,
        peak: peak.map(|p| (p.token, p.channel)),
        peak_initial,
        peak_series,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepBlockReport {
    pub jump: f64,
    /// 1-based block indices.
    pub step_up: Vec<usize>,
    pub step_down: Vec<usize>,
    /// `|F_i| / median(|F_j|, j < i)` for each step-up block.
    pub up_ratios: Vec<f64>,
    /// `|F_i| / |plateau|` for each step-down block.
    pub down_ratios: Vec<f64>,
}

impl StepBlockReport {
    fn empty(jump: f64) -> Self {
        StepBlockReport {
            jump,
            step_up: Vec::new(),
            step_down: Vec::new(),
            up_ratios: Vec::new(),
            down_ratios: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.step_up.is_empty() && self.step_down.is_empty()
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Locate the blocks that inject (step-up) and neutralize (step-down) the
/// peak spike channel.
///
/// Block outputs in the spike channel are the successive differences of its
/// post-block series. The plateau is the signed value at the peak. A block up
/// to the peak is a step-up block when its output has the plateau's sign and
/// exceeds `jump` times the median magnitude of all earlier block outputs. A
/// block after the peak is a step-down block when its output has the opposite
/// sign and magnitude at least `|plateau| / jump`.
pub fn detect_step_blocks(mt: &MagnitudeTrace, jump: f64) -> Result<StepBlockReport> {
    if !(jump > 1.0) {
        return Err(Error::Config(format!("step-block jump must exceed 1, got {jump}")));
    }
    let series = &mt.peak_series;
    let Some((peak_idx, plateau)) = series
        .iter()
        .copied()
        .enumerate()
        .fold(None::<(usize, f64)>, |best, (i, v)| match best {
            Some((_, b)) if b.abs() >= v.abs() => best,
            _ => Some((i, v)),
        })
    else {
        return Ok(StepBlockReport::empty(jump));
    };
    if plateau == 0.0 {
        return Ok(StepBlockReport::empty(jump));
    }
    let mut outputs = Vec::with_capacity(series.len());
    let mut prev = mt.peak_initial;
    for &v in series {
        outputs.push(v - prev);
        prev = v;
    }
    let sign = plateau.signum();
    let mut report = StepBlockReport::empty(jump);
    for i in 1..=peak_idx {
        let out = outputs[i];
        if out.signum() != sign {
            continue;
        }
        let earlier: Vec<f64> = outputs[..i].iter().map(|o| o.abs()).collect();
        let base = median(&earlier);
        if out.abs() > jump * base {
            report.step_up.push(i + 1);
            report.up_ratios.push(out.abs() / base);
        }
    }
    if report.step_up.is_empty() {
        return Ok(StepBlockReport::empty(jump));
    }
    for (i, &out) in outputs.iter().enumerate().skip(peak_idx + 1) {
        if out.signum() == -sign && out.abs() >= plateau.abs() / jump {
            report.step_down.push(i + 1);
            report.down_ratios.push(out.abs() / plateau.abs());
        }
    }
    Ok(report)
}

/// 1-based blocks whose post-residual states count as intermediate: all but
/// the first two and last two, or every block when there are four or fewer.
pub fn intermediate_blocks(n_blocks: usize) -> std::ops::RangeInclusive<usize> {
    if n_blocks > 4 {
        3..=n_blocks - 2
    } else {
        1..=n_blocks
    }
}

/// Largest absolute post-residual coordinate over the intermediate blocks.
pub fn max_intermediate_magnitude(trace: &ForwardTrace) -> f64 {
    intermediate_blocks(trace.n_blocks())
        .map(|i| trace.post_block(i).max_abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRatios {
    pub token: usize,
    /// `ratios[a][b] = |h[token, C_a]| / |h[token, C_b]|` over the sorted
    /// spike channels.
    pub ratios: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeReport {
    pub spike_channels: BTreeSet<usize>,
    pub spike_tokens: BTreeSet<usize>,
    /// Every flagged `(block, token, channel)` cell.
    pub cells: Vec<(usize, usize, usize)>,
    /// Inter-channel magnitude ratios per spike token, taken at the block
    /// holding the largest spike.
    pub channel_ratio_matrix: Vec<TokenRatios>,
    /// Largest absolute intermediate post-residual value.
    pub max_spike: f64,
    /// Block whose post-residual state holds `max_spike`.
    pub max_block: usize,
}

impl SpikeReport {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Flag `(token, channel)` cells whose magnitude exceeds
/// `max(abs_floor, rel_factor × median_t max_c |H[t,c]|)` in any
/// intermediate post-residual state.
pub fn detect_spikes(trace: &ForwardTrace, abs_floor: f64, rel_factor: f64) -> Result<SpikeReport> {
    let mut cells = Vec::new();
    let mut channels = BTreeSet::new();
    let mut tokens = BTreeSet::new();
    let mut max_spike = 0.0;
    let mut max_block = 0;
    for block in intermediate_blocks(trace.n_blocks()) {
        let h = trace.post_block(block);
        let (rows, cols) = h.dims2()?;
        let token_max: Vec<f64> = (0..rows)
            .map(|t| h.row(t).iter().fold(0.0, |m, v| f64::max(m, v.abs())))
            .collect();
        let threshold = abs_floor.max(rel_factor * median(&token_max));
        for t in 0..rows {
            for c in 0..cols {
                let m = h.data()[t * cols + c].abs();
                if m > max_spike {
                    max_spike = m;
                    max_block = block;
                }
                if m > threshold {
                    cells.push((block, t, c));
                    channels.insert(c);
                    tokens.insert(t);
                }
            }
        }
    }
    let mut channel_ratio_matrix = Vec::new();
    if !cells.is_empty() {
        let h = trace.post_block(max_block);
        let d = h.shape()[1];
        let chans: Vec<usize> = channels.iter().copied().collect();
        for &t in &tokens {
            let vals: Vec<f64> = chans.iter().map(|&c| h.data()[t * d + c].abs()).collect();
            let ratios = vals
                .iter()
                .map(|a| vals.iter().map(|b| a / b).collect())
                .collect();
            channel_ratio_matrix.push(TokenRatios { token: t, ratios });
        }
    }
    Ok(SpikeReport {
        spike_channels: channels,
        spike_tokens: tokens,
        cells,
        channel_ratio_matrix,
        max_spike,
        max_block,
    })
}
