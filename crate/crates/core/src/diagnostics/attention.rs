use super::trace::detect_spikes;
use crate::error::{Error, Result};
use crate::model::{
    apply_norm, attention_block, model_forward, AttentionParams, ModelConfig, Norm, Parameters,
    SeqLayout,
};
use crate::tensor::{Tape, Tensor, Var};

fn bind_norm(tape: &mut Tape, n: &Norm<Tensor>) -> Norm<Var> {
    match n {
        Norm::Rms { scale } => Norm::Rms {
            scale: tape.constant(scale.clone()),
        },
        Norm::DynTanh { alpha, gamma, beta } => Norm::DynTanh {
            alpha: tape.constant(alpha.clone()),
            gamma: tape.constant(gamma.clone()),
            beta: tape.constant(beta.clone()),
        },
    }
}

fn bind_attention(tape: &mut Tape, p: &AttentionParams<Tensor>) -> AttentionParams<Var> {
    AttentionParams {
        in_norm: p.in_norm.as_ref().map(|n| bind_norm(tape, n)),
        out_norm: p.out_norm.as_ref().map(|n| bind_norm(tape, n)),
        q_norm: p.q_norm.as_ref().map(|t| tape.constant(t.clone())),
        k_norm: p.k_norm.as_ref().map(|t| tape.constant(t.clone())),
        w_q: tape.constant(p.w_q.clone()),
        w_k: tape.constant(p.w_k.clone()),
        w_v: tape.constant(p.w_v.clone()),
        w_o: tape.constant(p.w_o.clone()),
        gate: p.gate.as_ref().map(|t| tape.constant(t.clone())),
    }
}

/// `W_VO = Σ_h W_V^(h) W_O^(h)`, where `W_V^(h)` is head `h`'s column slice
/// of `W_V` and `W_O^(h)` its row slice of `W_O`.
pub fn vo_matrix(p: &AttentionParams<Tensor>, n_heads: usize) -> Result<Tensor> {
    let (d, width) = p.w_v.dims2()?;
    if p.w_o.shape() != [width, d] || n_heads == 0 || width % n_heads != 0 {
        return Err(Error::Dimension(format!(
            "W_V {:?} and W_O {:?} with {n_heads} heads",
            p.w_v.shape(),
            p.w_o.shape()
        )));
    }
    let dh = width / n_heads;
    let (wv, wo) = (p.w_v.data(), p.w_o.data());
    let mut out = vec![0.0; d * d];
    for h in 0..n_heads {
        for r in 0..d {
            for c in 0..d {
                let mut acc = 0.0;
                for j in h * dh..(h + 1) * dh {
                    acc += wv[r * width + j] * wo[j * d + c];
                }
                out[r * d + c] += acc;
            }
        }
    }
    Tensor::new(vec![d, d], out)
}

/// Output of one attention block for a single sequence `h: [T × d]`:
/// `(normalized input, F_attn before any output norm, per-head A^(h))`.
pub fn attention_forward(
    p: &AttentionParams<Tensor>,
    cfg: &ModelConfig,
    h: &Tensor,
) -> Result<(Tensor, Tensor, Vec<Tensor>)> {
    let (t, _) = h.dims2()?;
    let mut tape = Tape::new();
    let bound = bind_attention(&mut tape, p);
    let x = tape.constant(h.clone());
    let normed = match &bound.in_norm {
        Some(n) => apply_norm(&mut tape, x, n)?,
        None => x,
    };
    let tokens = vec![0; t];
    let layout = SeqLayout {
        seq_len: t,
        tokens: &tokens,
        embedding_rows: x,
    };
    let out = attention_block(&mut tape, normed, &bound, cfg, &layout)?;
    let probs = tape.attention_probs(out.heads).expect("attention node");
    let maps = probs
        .chunks(t * t)
        .map(|c| Tensor::new(vec![t, t], c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((tape.value(normed).clone(), tape.value(out.out).clone(), maps))
}

/// Largest deviation between the block's concatenated-heads output and the
/// per-head sum `Σ_h A^(h) H̃ W_V^(h) W_O^(h)`, the latter evaluated with
/// plain loops.
pub fn head_sum_check(p: &AttentionParams<Tensor>, cfg: &ModelConfig, h: &Tensor) -> Result<f64> {
    if p.gate.is_some() {
        return Err(Error::Config("head-sum check applies to ungated attention".into()));
    }
    let (normed, out, maps) = attention_forward(p, cfg, h)?;
    let (t, d) = normed.dims2()?;
    let width = cfg.attn_width();
    let dh = cfg.d_head;
    let (x, wv, wo) = (normed.data(), p.w_v.data(), p.w_o.data());
    let mut reference = vec![0.0; t * d];
    for (head, a) in maps.iter().enumerate() {
        let cols = head * dh..(head + 1) * dh;
        let mut v = vec![0.0; t * dh];
        for r in 0..t {
            for (jj, j) in cols.clone().enumerate() {
                v[r * dh + jj] = (0..d).map(|c| x[r * d + c] * wv[c * width + j]).sum();
            }
        }
        for r in 0..t {
            let mut y = vec![0.0; dh];
            for s in 0..t {
                let w = a.data()[r * t + s];
                for jj in 0..dh {
                    y[jj] += w * v[s * dh + jj];
                }
            }
            for c in 0..d {
                reference[r * d + c] += cols
                    .clone()
                    .enumerate()
                    .map(|(jj, j)| y[jj] * wo[j * d + c])
                    .sum::<f64>();
            }
        }
    }
    Ok(out
        .data()
        .iter()
        .zip(&reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Fraction of `vocab` tokens that become spike tokens when placed at
/// `position` after a run of `filler` tokens. A token counts when any of its
/// intermediate post-residual coordinates exceeds `abs_floor`.
pub fn vocab_position_probe(
    params: &Parameters,
    cfg: &ModelConfig,
    position: usize,
    vocab: &[usize],
    filler: usize,
    abs_floor: f64,
) -> Result<f64> {
    if position >= cfg.max_seq {
        return Err(Error::Context {
            len: position + 1,
            max: cfg.max_seq,
        });
    }
    if vocab.is_empty() {
        return Ok(0.0);
    }
    let mut flagged = 0;
    for &id in vocab {
        let mut tokens = vec![filler; position];
        tokens.push(id);
        let (_, trace) = model_forward(&tokens, params, cfg, true)?;
        let report = detect_spikes(&trace.expect("captured"), abs_floor, 0.0)?;
        if report.spike_tokens.contains(&position) {
            flagged += 1;
        }
    }
    Ok(flagged as f64 / vocab.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vo_identity_and_cancellation() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 2,
            n_heads: 1,
            d_head: 2,
            d_ffn: 4,
            ..ModelConfig::default()
        };
        let mut params = Parameters::init(&cfg, 0).unwrap();
        let crate::model::BlockParams::Attention(a) = &mut params.blocks[0] else {
            unreachable!()
        };
        a.w_v = Tensor::eye(2);
        a.w_o = Tensor::eye(2);
        assert_eq!(vo_matrix(a, 1).unwrap(), Tensor::eye(2));

        // two one-wide heads: W_O rows of opposite sign, equal W_V columns
        a.w_v = Tensor::new(vec![2, 2], vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        a.w_o = Tensor::new(vec![2, 2], vec![0.5, -3.0, -0.5, 3.0]).unwrap();
        assert!(vo_matrix(a, 2).unwrap().data().iter().all(|&x| x == 0.0));
    }
}
