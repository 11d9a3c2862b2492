use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sinklab::data::{chunk_corpus, split_holdout, Corpus, TokenSeq};
use sinklab::diagnostics::report::{
    magnitude_rows, sink_rows, write_csv, write_json, EigenRow, FrobeniusRow,
};
use sinklab::diagnostics::{
    cosine, detect_spikes, detect_step_blocks, frobenius_profile, max_intermediate_magnitude,
    quadratic_form, quadratic_value, residual_trace, sink_report, spectrum, swiglu_weights,
    top_eigenpair, SpikeReport, StepBlockReport, EIGEN_MAX_ITER, EIGEN_TOL,
};
use sinklab::model::{checkpoint, model_forward, ForwardTrace, ModelConfig, Parameters};
use sinklab::train::{evaluate_nll, train_run, TrainData};
use sinklab::{Error, Result};

use crate::config::{DiagnosticsConfig, ExperimentConfig};

/// Headline numbers of one run plus the files it wrote, relative to the
/// output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub perplexity: Option<f64>,
    pub sink_ratio: Option<f64>,
    /// Largest intermediate post-residual magnitude over the traced sequences.
    pub spike: Option<f64>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

const EVAL_BATCH: usize = 16;

fn load_chunks(corpus: &Path, seq_len: usize, holdout: usize) -> Result<(Vec<TokenSeq>, Vec<TokenSeq>)> {
    let corpus = Corpus::from_file(corpus)?;
    split_holdout(chunk_corpus(&corpus, seq_len)?, holdout)
}

fn trace_sequences(
    params: &Parameters,
    cfg: &ModelConfig,
    chunks: &[TokenSeq],
    n: usize,
) -> Result<Vec<ForwardTrace>> {
    chunks
        .iter()
        .take(n)
        .map(|c| {
            let (_, trace) = model_forward(c.inputs(), params, cfg, true)?;
            Ok(trace.expect("trace requested"))
        })
        .collect()
}

fn spike_of(traces: &[ForwardTrace]) -> f64 {
    traces.iter().map(max_intermediate_magnitude).fold(0.0, f64::max)
}

fn record(report: &mut Report, out: &Path, key: &str, name: &str) -> PathBuf {
    report.artifacts.insert(key.to_string(), PathBuf::from(name));
    out.join(name)
}

/// Train from the config, then write `model.ckpt`, `metrics.jsonl` and
/// `report.json` under the output directory.
pub fn run_train(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let out = cfg.output.dir.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (train, held_out) = load_chunks(&cfg.data.corpus, cfg.train.seq_len, cfg.data.eval_chunks)?;
    log::info!(
        "training on {} chunks of {} tokens, {} held out",
        train.len(),
        cfg.train.seq_len,
        held_out.len()
    );
    let outcome = train_run(&cfg.model, &cfg.train, &TrainData { train, held_out }, Some(out))?;

    let mut report = Report::default();
    report.artifacts.insert("metrics".into(), PathBuf::from("metrics.jsonl"));
    let ckpt = record(&mut report, out, "checkpoint", "model.ckpt");
    checkpoint::save(&ckpt, &outcome.params, &cfg.model)?;
    for (i, p) in outcome.checkpoints.iter().enumerate() {
        if let Ok(rel) = p.strip_prefix(out) {
            report.artifacts.insert(format!("checkpoint_{i:03}"), rel.to_path_buf());
        }
    }

    let d = &cfg.diagnostics;
    let (_, eval) = load_chunks(&cfg.data.corpus, d.eval_seq_len, cfg.data.eval_chunks)?;
    let traces = trace_sequences(&outcome.params, &cfg.model, &eval, d.eval_sequences)?;
    report.perplexity = Some(outcome.perplexity);
    report.sink_ratio = Some(sink_report(&traces, d.epsilon)?.sink_ratio);
    report.spike = Some(spike_of(&traces));

    let path = record(&mut report, out, "report", "report.json");
    write_json(&path, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
struct TraceRow {
    sequence: usize,
    block: usize,
    series: String,
    rank: usize,
    magnitude: f64,
    token: usize,
    channel: usize,
}

#[derive(Debug, Clone, Serialize)]
struct SequenceSpikes {
    sequence: usize,
    report: SpikeReport,
    step_blocks: StepBlockReport,
}

#[derive(Debug, Clone, Serialize)]
struct QuadraticEntry {
    block: usize,
    channel: usize,
    frobenius: f64,
    eigenvalue: f64,
    eigen_residual: f64,
    eigen_iterations: usize,
    /// Hidden state probed: the traced sequence and token holding the
    /// largest spike.
    sequence: usize,
    token: usize,
    /// `h̃ᵀ U_k h̃`
    exact: f64,
    /// `λ⋆ · √d · cos(s⋆, h̃)`
    reading_sqrt_d_cos: f64,
    /// `λ⋆ · d · cos²(s⋆, h̃)`
    reading_d_cos_sq: f64,
    cos: Option<f64>,
}

/// Output-channel indices of the `k` largest values, ties to the lower index.
fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Run every diagnostic on a checkpoint over held-out chunks of `corpus`
/// and write the CSV/JSON artifacts plus `report.json` into `out`.
pub fn run_diagnose(
    checkpoint_path: &Path,
    expected: Option<&ModelConfig>,
    corpus: &Path,
    eval_chunks: usize,
    diag: &DiagnosticsConfig,
    out: &Path,
) -> Result<Report> {
    let (cfg, params) = checkpoint::load(checkpoint_path)?;
    if let Some(want) = expected.filter(|w| **w != cfg) {
        return Err(Error::Container(format!(
            "checkpoint {} was written for a different model config ({:?} vs {:?})",
            checkpoint_path.display(),
            cfg,
            want
        )));
    }
    if diag.eval_seq_len > cfg.max_seq {
        return Err(Error::Context {
            len: diag.eval_seq_len,
            max: cfg.max_seq,
        });
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (_, eval) = load_chunks(corpus, diag.eval_seq_len, eval_chunks)?;
    let traces = trace_sequences(&params, &cfg, &eval, diag.eval_sequences)?;
    let mut report = Report::default();

    let nll = evaluate_nll(&params, &cfg, &eval, (1, diag.eval_seq_len), EVAL_BATCH)?;
    report.perplexity = Some(nll.exp());

    // residual magnitudes, spikes, step blocks
    let mut rows = Vec::new();
    let mut spikes = Vec::new();
    for (s, tr) in traces.iter().enumerate() {
        let mt = residual_trace(tr, diag.top_k)?;
        rows.extend(magnitude_rows(&mt).into_iter().map(|r| TraceRow {
            sequence: s,
            block: r.block,
            series: r.series,
            rank: r.rank,
            magnitude: r.magnitude,
            token: r.token,
            channel: r.channel,
        }));
        spikes.push(SequenceSpikes {
            sequence: s,
            report: detect_spikes(tr, diag.abs_floor, diag.rel_factor)?,
            step_blocks: detect_step_blocks(&mt, diag.jump)?,
        });
    }
    write_csv(&record(&mut report, out, "magnitude_trace", "magnitude_trace.csv"), &rows)?;
    write_json(&record(&mut report, out, "spikes", "spikes.json"), &spikes)?;
    report.spike = Some(spike_of(&traces));

    // where the largest spike sits, for the quadratic-form probe
    let (peak_seq, peak_token) = spikes
        .iter()
        .filter(|s| !s.report.cells.is_empty())
        .max_by(|a, b| a.report.max_spike.total_cmp(&b.report.max_spike).then(b.sequence.cmp(&a.sequence)))
        .map(|s| {
            let tr = &traces[s.sequence];
            let h = tr.post_block(s.report.max_block);
            let (t, d) = (h.shape()[0], h.shape()[1]);
            let best = (0..t * d).fold(0, |b, i| if h.data()[i].abs() > h.data()[b].abs() { i } else { b });
            (s.sequence, best / d)
        })
        .unwrap_or((0, 0));

    // SwiGLU quadratic forms
    let mut frob_rows = Vec::new();
    let mut eigen_rows = Vec::new();
    let mut quad = Vec::new();
    for (b, block) in params.blocks.iter().enumerate() {
        if swiglu_weights::<sinklab::Tensor>(block).is_err() {
            continue;
        }
        let profile = frobenius_profile(block)?;
        frob_rows.extend(profile.iter().enumerate().map(|(k, &f)| FrobeniusRow {
            block: b + 1,
            channel: k,
            frobenius: f,
        }));
        for k in top_indices(&profile, diag.top_k) {
            let q = quadratic_form(block, k)?;
            for (r, &ev) in spectrum(&q.s)?.iter().enumerate() {
                eigen_rows.push(EigenRow {
                    block: b + 1,
                    channel: k,
                    rank: r + 1,
                    eigenvalue: ev,
                });
            }
            quad.push(quadratic_entry(b, &q, &traces, peak_seq, peak_token)?);
        }
    }
    write_csv(&record(&mut report, out, "frobenius", "frobenius.csv"), &frob_rows)?;
    write_csv(&record(&mut report, out, "eigen_spectrum", "eigen_spectrum.csv"), &eigen_rows)?;
    write_json(&record(&mut report, out, "quadratic", "quadratic.json"), &quad)?;

    // attention sinks
    let sinks = sink_report(&traces, diag.epsilon)?;
    write_csv(&record(&mut report, out, "sink_scores", "sink_scores.csv"), &sink_rows(&sinks))?;
    write_json(&record(&mut report, out, "sinks", "sinks.json"), &sinks)?;
    report.sink_ratio = Some(sinks.sink_ratio);

    let path = record(&mut report, out, "report", "report.json");
    write_json(&path, &report)?;
    Ok(report)
}

fn quadratic_entry(
    b: usize,
    q: &sinklab::diagnostics::QuadraticFormResult,
    traces: &[ForwardTrace],
    seq: usize,
    token: usize,
) -> Result<QuadraticEntry> {
    let eig = top_eigenpair(&q.s, EIGEN_TOL, EIGEN_MAX_ITER)?;
    let h = traces
        .get(seq)
        .map(|tr| tr.normalized_inputs[b].row(token).to_vec())
        .ok_or_else(|| Error::Dimension("no traced sequences".into()))?;
    let d = h.len() as f64;
    let c = cosine(&eig.vector, &h);
    let cv = c.unwrap_or(0.0);
    Ok(QuadraticEntry {
        block: b + 1,
        channel: q.channel,
        frobenius: q.frobenius,
        eigenvalue: eig.value,
        eigen_residual: eig.residual,
        eigen_iterations: eig.iterations,
        sequence: seq,
        token,
        exact: quadratic_value(&q.u, &h),
        reading_sqrt_d_cos: eig.value * d.sqrt() * cv,
        reading_d_cos_sq: eig.value * d * cv * cv,
        cos: c,
    })
}
