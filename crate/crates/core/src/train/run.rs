use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{clip_global_norm, lr_at_step, masked_nll, adamw_step, OptimizerState, TrainConfig};
use crate::data::{sample_batch, Batch, BatchSampler, TokenSeq};
use crate::error::{Error, Result};
use crate::model::{bind, checkpoint, forward, ModelConfig, Parameters};
use crate::tensor::{Tape, Var};

/// Chunks of `seq_len + 1` tokens for training and held-out evaluation.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<TokenSeq>,
    pub held_out: Vec<TokenSeq>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub metrics: Vec<StepMetrics>,
    /// Mean NLL over every position of the held-out chunks.
    pub held_out_nll: f64,
    pub perplexity: f64,
    pub checkpoints: Vec<PathBuf>,
}

/// Offset between the weight-init stream and the batch-order stream.
const SAMPLER_SEED_OFFSET: u64 = 0x5851_F42D_4C95_7F2D;

/// Loss and flat gradients (canonical parameter order) on one batch.
pub fn loss_and_grads(
    params: &Parameters,
    cfg: &ModelConfig,
    batch: &Batch,
    pos_range: (usize, usize),
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, true);
    let out = forward(&mut tape, &bound, cfg, &batch.inputs, batch.seq_len, false)?;
    let loss = masked_nll(&mut tape, out.logits, &batch.targets, batch.seq_len, pos_range)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let mut vars: Vec<Var> = Vec::new();
    bound.map(|_, v| vars.push(*v));
    let flat = vars
        .into_iter()
        .map(|v| {
            grads
                .take(v)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();
    Ok((value, flat))
}

/// Mean masked NLL over `chunks`, evaluated in groups of `batch` sequences.
pub fn evaluate_nll(
    params: &Parameters,
    cfg: &ModelConfig,
    chunks: &[TokenSeq],
    pos_range: (usize, usize),
    batch: usize,
) -> Result<f64> {
    if chunks.is_empty() {
        return Err(Error::EmptyCorpus { tokens: 0, needed: 1 });
    }
    let mut total = 0.0;
    for group in chunks.chunks(batch.max(1)) {
        let b = Batch::from_chunks(group)?;
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params, false);
        let out = forward(&mut tape, &bound, cfg, &b.inputs, b.seq_len, false)?;
        let loss = masked_nll(&mut tape, out.logits, &b.targets, b.seq_len, pos_range)?;
        total += tape.value(loss).data()[0] * group.len() as f64;
    }
    Ok(total / chunks.len() as f64)
}

/// Train from a fresh initialization. With `out_dir`, per-step metrics go to
/// `metrics.jsonl` and checkpoints to `checkpoints/step_NNNNNN.ckpt`.
///
/// A non-finite loss aborts the run; checkpoints already written are kept.
pub fn train_run(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if cfg.seq_len > model_cfg.max_seq {
        return Err(Error::Context {
            len: cfg.seq_len,
            max: model_cfg.max_seq,
        });
    }
    let width = cfg.seq_len + 1;
    if data.train.is_empty() {
        return Err(Error::EmptyCorpus { tokens: 0, needed: width });
    }
    if let Some(bad) = data.train.iter().chain(&data.held_out).find(|c| c.len() != width) {
        return Err(Error::Dimension(format!(
            "chunk of {} tokens for seq_len {}",
            bad.len(),
            cfg.seq_len
        )));
    }

    let mut params = Parameters::init(model_cfg, cfg.seed)?;
    let mut state = OptimizerState::new(&params);
    let mut sampler = BatchSampler::new(data.train.len(), cfg.seed ^ SAMPLER_SEED_OFFSET)?;
    let batch_size = cfg.batch_size();

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(f)))
        }
        None => None,
    };
    let mut metrics = Vec::with_capacity(cfg.total_steps);
    let mut checkpoints = Vec::new();

    for step in 1..=cfg.total_steps {
        let batch = sample_batch(&data.train, batch_size, &mut sampler)?;
        let (loss, mut grads) = loss_and_grads(&params, model_cfg, &batch, cfg.pos_range())?;
        if !loss.is_finite() {
            if let Some((path, w)) = log.as_mut() {
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
            return Err(Error::NonFinite { step });
        }
        let lr = lr_at_step(step, cfg);
        clip_global_norm(&mut grads, cfg.grad_clip);
        adamw_step(&mut params, &grads, &mut state, lr, cfg)?;

        let record = StepMetrics { step, lr, loss };
        metrics.push(record);
        if let Some((path, w)) = log.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            writeln!(w).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if step % 100 == 0 {
            log::info!("step {step} lr {lr:.3e} loss {loss:.4}");
        }
        if let Some(dir) = out_dir.filter(|_| step % cfg.checkpoint_every == 0) {
            let path = dir.join("checkpoints").join(format!("step_{step:06}.ckpt"));
            checkpoint::save(&path, &params, model_cfg)?;
            checkpoints.push(path);
        }
    }
    if let Some((path, w)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }

    let eval_chunks = if data.held_out.is_empty() {
        &data.train
    } else {
        &data.held_out
    };
    let held_out_nll = evaluate_nll(&params, model_cfg, eval_chunks, (1, cfg.seq_len), batch_size)?;
    Ok(TrainOutcome {
        params,
        metrics,
        held_out_nll,
        perplexity: held_out_nll.exp(),
        checkpoints,
    })
}
