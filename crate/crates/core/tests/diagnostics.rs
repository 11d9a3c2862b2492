use sinklab::diagnostics::{
    detect_spikes, importance_scores, residual_trace, sink_ratio, spike_cosine_matrix, vocab_position_probe,
};
use sinklab::model::{BlockParams, FfnKind, FfnWeights, ForwardTrace, ModelConfig, Norm, NormKind, Parameters};
use sinklab::Tensor;

const TOL: f64 = 1e-9;

fn uniform_causal(t: usize) -> Tensor {
    let mut a = Tensor::zeros(&[t, t]);
    for r in 0..t {
        for c in 0..=r {
            a.data_mut()[r * t + c] = 1.0 / (r + 1) as f64;
        }
    }
    a
}

fn pure_sink(t: usize) -> Tensor {
    let mut a = Tensor::zeros(&[t, t]);
    for r in 0..t {
        a.data_mut()[r * t] = 1.0;
    }
    a
}

#[test]
fn uniform_causal_first_position_scores() {
    let alpha = importance_scores(&uniform_causal(4)).unwrap();
    assert!((alpha[0] - 25.0 / 48.0).abs() < TOL);
    assert!((alpha[0] - 0.520833).abs() < 1e-6);

    let harmonic: f64 = (1..=64).map(|k| 1.0 / k as f64).sum();
    assert!((harmonic - 4.743891).abs() < 1e-6);
    let alpha = importance_scores(&uniform_causal(64)).unwrap();
    assert!((alpha[0] - harmonic / 64.0).abs() < TOL);
    // the commonly quoted 0.074125 is H₆₄/64 = 0.0741233 rounded loosely
    assert!((alpha[0] - 0.074125).abs() < 5e-6);
    // α_k = (H_T − H_{k−1}) / T
    for k in 1..=64 {
        let tail: f64 = (k..=64).map(|j| 1.0 / j as f64).sum();
        assert!((alpha[k - 1] - tail / 64.0).abs() < TOL);
    }
}

#[test]
fn sink_ratio_counts_constructed_heads() {
    let t = 64;
    let mut maps = vec![uniform_causal(t); 10];
    for m in maps.iter_mut().take(3) {
        *m = pure_sink(t);
    }
    assert!((sink_ratio(&maps, 0.3, t).unwrap() - 0.3).abs() < TOL);
    assert_eq!(sink_ratio(&vec![uniform_causal(t); 8], 0.3, t).unwrap(), 0.0);
    assert_eq!(sink_ratio(&maps, 0.0, t).unwrap(), 1.0);

    let eps = [0.05, 0.1, 0.3, 0.5];
    let ratios: Vec<f64> = eps.iter().map(|&e| sink_ratio(&maps, e, t).unwrap()).collect();
    assert!(ratios.windows(2).all(|w| w[0] >= w[1]), "{ratios:?}");
    // uniform heads clear 0.05 (α₁ = 0.074) but not 0.1
    assert_eq!(ratios, vec![1.0, 0.3, 0.3, 0.3]);
}

#[test]
fn sink_ratio_rejects_mismatched_shapes() {
    assert!(sink_ratio(&[uniform_causal(4)], 0.3, 5).is_err());
}

fn synthetic_trace(states: Vec<Tensor>) -> ForwardTrace {
    let n = states.len() - 1;
    let t = states[0].shape()[0];
    ForwardTrace {
        tokens: vec![0; t],
        block_outputs: states[1..].to_vec(),
        normalized_inputs: states[1..].to_vec(),
        attention: vec![None; n],
        final_normed: states[n].clone(),
        logits: states[n].clone(),
        residuals: states,
    }
}

#[test]
fn planted_spikes_with_fixed_ratio() {
    let (t, d) = (8, 32);
    let states: Vec<Tensor> = (0..7)
        .map(|i| {
            let mut h = Tensor::new(vec![t, d], (0..t * d).map(|j| ((j * 7 + i) % 13) as f64 * 0.1 - 0.6).collect()).unwrap();
            if i == 3 || i == 4 {
                for tok in [0, 5] {
                    h.data_mut()[tok * d + 7] = 3000.0;
                    h.data_mut()[tok * d + 21] = -1000.0;
                }
            }
            h
        })
        .collect();
    let report = detect_spikes(&synthetic_trace(states), 50.0, 100.0).unwrap();
    assert_eq!(report.spike_channels.iter().copied().collect::<Vec<_>>(), vec![7, 21]);
    assert_eq!(report.spike_tokens.iter().copied().collect::<Vec<_>>(), vec![0, 5]);
    assert_eq!(report.max_spike, 3000.0);
    assert_eq!(report.channel_ratio_matrix.len(), 2);
    for row in &report.channel_ratio_matrix {
        assert!((row.ratios[0][1] - 3.0).abs() < 1e-12);
        assert!((row.ratios[1][0] - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn quiet_trace_has_no_spikes_and_planted_peak_is_located() {
    let (t, d) = (5, 16);
    let mut states = vec![Tensor::full(&[t, d], 0.5); 7];
    let report = detect_spikes(&synthetic_trace(states.clone()), 50.0, 100.0).unwrap();
    assert!(report.is_empty() && report.spike_channels.is_empty());

    states[2].data_mut()[7] = 1000.0;
    let mt = residual_trace(&synthetic_trace(states), 3).unwrap();
    assert_eq!(mt.post_residual[2][0].token, 0);
    assert_eq!(mt.post_residual[2][0].channel, 7);
    assert!(mt.post_residual.iter().all(|l| l.len() == 3));
}

#[test]
fn dominant_coordinate_collapses_cosines() {
    let d = 64;
    let mut noise = vec![0.0; d];
    for (i, x) in noise.iter_mut().enumerate() {
        *x = if i % 2 == 0 { 1.0 } else { -1.0 } * ((i % 5) as f64 + 1.0);
    }
    noise[7] = 0.0;
    let n = noise.iter().map(|x| x * x).sum::<f64>().sqrt();
    noise.iter_mut().for_each(|x| *x /= n);
    let a: Vec<f64> = (0..d).map(|i| if i == 7 { 1000.0 } else { 0.0 } + noise[i]).collect();
    let b: Vec<f64> = (0..d).map(|i| if i == 7 { 1000.0 } else { 0.0 } - noise[i]).collect();
    let norm = Norm::Rms {
        scale: Tensor::ones(&[d]),
    };
    let c = spike_cosine_matrix(&[a, b], Some(&norm)).unwrap();
    // (10⁶ − 1)/(10⁶ + 1)
    assert!(c[0][1] > 0.999995);
    assert!((c[0][1] - (1e6 - 1.0) / (1e6 + 1.0)).abs() < 1e-12);
    assert!((c[0][0] - 1.0).abs() < 1e-12);
}

fn probe_model() -> (ModelConfig, Parameters) {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_head: 4,
        d_ffn: 4,
        vocab_size: 16,
        max_seq: 8,
        norm_kind: NormKind::PreNorm,
        ffn_kind: FfnKind::Swiglu,
        ..ModelConfig::default()
    };
    (cfg.clone(), Parameters::init(&cfg, 5).unwrap())
}

fn ffn_weights(p: &mut Parameters, block: usize) -> (&mut Tensor, &mut Tensor, &mut Tensor) {
    match &mut p.blocks[block] {
        BlockParams::FeedForward(f) => match &mut f.weights {
            FfnWeights::Swiglu { w_gate, w_up, w_down } => (w_gate, w_up, w_down),
            _ => panic!("not swiglu"),
        },
        _ => panic!("not a feed-forward block"),
    }
}

#[test]
fn vocab_probe_examples() {
    let (cfg, mut params) = probe_model();
    let vocab: Vec<usize> = (0..cfg.vocab_size).collect();
    for b in [1, 3] {
        let (g, u, w) = ffn_weights(&mut params, b);
        g.data_mut().fill(0.0);
        u.data_mut().fill(0.0);
        w.data_mut().fill(0.0);
    }
    assert_eq!(vocab_position_probe(&params, &cfg, 0, &vocab, 0, 50.0).unwrap(), 0.0);

    // every embedding shares +1 on channel 0; the first FFN squares it into a
    // huge write on channel 3
    for row in 0..cfg.vocab_size {
        params.embedding.data_mut()[row * cfg.d_model] = 1.0 + (row as f64) * 1e-3;
    }
    let (g, u, w) = ffn_weights(&mut params, 1);
    g.data_mut()[0] = 20.0;
    u.data_mut()[0] = 20.0;
    w.data_mut()[3 * cfg.d_ffn] = 50.0;
    assert_eq!(vocab_position_probe(&params, &cfg, 0, &vocab, 0, 50.0).unwrap(), 1.0);
    assert!(vocab_position_probe(&params, &cfg, cfg.max_seq, &vocab, 0, 50.0).is_err());
}
