use sinklab::data::{chunk_corpus, split_holdout, Corpus, TokenSeq};
use sinklab::model::{checkpoint, FfnKind, ModelConfig, NormKind};
use sinklab::train::{adamw_update, evaluate_nll, masked_nll, train_run, TrainConfig, TrainData};
use sinklab::{Tape, Tensor};

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        d_ffn: 32,
        vocab_size: 256,
        max_seq: 16,
        norm_kind: NormKind::PreNorm,
        ffn_kind: FfnKind::Swiglu,
        ..ModelConfig::default()
    }
}

fn repetitive_data() -> TrainData {
    let text: Vec<u8> = b"the cat sat on the mat. ".iter().copied().cycle().take(1000).collect();
    let chunks = chunk_corpus(&Corpus::from_bytes("mem", &text), 16).unwrap();
    let (train, held_out) = split_holdout(chunks, 4).unwrap();
    TrainData { train, held_out }
}

fn short_run(steps: usize) -> TrainConfig {
    TrainConfig {
        base_lr: 1e-2,
        warmup_steps: 5,
        total_steps: steps,
        batch_tokens: 64,
        seq_len: 16,
        loss_pos_min: 1,
        loss_pos_max: 16,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn fifty_steps_fit_a_repetitive_corpus() {
    let data = repetitive_data();
    let out = train_run(&tiny(), &short_run(50), &data, None).unwrap();
    let first = out.metrics[0].loss;
    let last = out.metrics.last().unwrap().loss;
    assert!((first - 256f64.ln()).abs() < 0.5, "initial loss {first}");
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert!(out.held_out_nll < 256f64.ln());
}

#[test]
fn perplexity_is_exp_of_held_out_nll() {
    let data = repetitive_data();
    let cfg = short_run(5);
    let out = train_run(&tiny(), &cfg, &data, None).unwrap();
    let nll = evaluate_nll(&out.params, &tiny(), &data.held_out, (1, 16), 4).unwrap();
    assert_eq!(nll.to_bits(), out.held_out_nll.to_bits());
    assert!((out.perplexity - nll.exp()).abs() < 1e-12 * out.perplexity);
}

#[test]
fn runs_are_bit_deterministic_and_checkpoints_round_trip() {
    let data = repetitive_data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 4,
        ..short_run(8)
    };
    let a = train_run(&tiny(), &cfg, &data, Some(&dir.path().join("a"))).unwrap();
    let b = train_run(&tiny(), &cfg, &data, Some(&dir.path().join("b"))).unwrap();
    assert_eq!(checkpoint::encode(&a.params).unwrap(), checkpoint::encode(&b.params).unwrap());
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.checkpoints.len(), 2);
    for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let (cfg_back, params_back) = checkpoint::load(&a.checkpoints[1]).unwrap();
    assert_eq!(cfg_back, tiny());
    assert_eq!(checkpoint::encode(&params_back).unwrap(), checkpoint::encode(&a.params).unwrap());

    let other = train_run(&tiny(), &TrainConfig { seed: 4, ..cfg }, &data, None).unwrap();
    assert_ne!(checkpoint::encode(&other.params).unwrap(), checkpoint::encode(&a.params).unwrap());
}

#[test]
fn adamw_matches_scalar_recurrence() {
    let (lr, (b1, b2), eps, wd) = (0.05, (0.9, 0.95), 1e-8, 0.1);
    let grads = [0.3, -1.2, 0.8, 0.0, 2.5, -0.1, 0.4, -0.7, 1.1, 0.05];
    let mut p = [1.5, -0.25];
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    let mut q = p;
    let (mut mq, mut vq) = ([0.0f64; 2], [0.0f64; 2]);
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        let gs = [g, -2.0 * g];
        adamw_update(&mut p, &gs, &mut m, &mut v, t as u64, lr, (b1, b2), eps, wd);
        for j in 0..2 {
            mq[j] = b1 * mq[j] + (1.0 - b1) * gs[j];
            vq[j] = b2 * vq[j] + (1.0 - b2) * gs[j] * gs[j];
            let mh = mq[j] / (1.0 - b1.powi(t));
            let vh = vq[j] / (1.0 - b2.powi(t));
            q[j] = q[j] - lr * mh / (vh.sqrt() + eps) - lr * wd * q[j];
        }
    }
    for j in 0..2 {
        assert!((p[j] - q[j]).abs() < 1e-12, "{} vs {}", p[j], q[j]);
    }
}

#[test]
fn masked_logits_do_not_move_the_loss() {
    let (seq, vocab, lo) = (64, 7, 32);
    let rows = 2 * seq;
    let base: Vec<f64> = (0..rows * vocab).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.5).collect();
    let targets: Vec<usize> = (0..rows).map(|r| (r * 5) % vocab).collect();
    let loss = |z: Vec<f64>| {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::new(vec![rows, vocab], z).unwrap());
        let l = masked_nll(&mut tape, v, &targets, seq, (lo, seq)).unwrap();
        let g = tape.backward(l).unwrap().take(v).unwrap();
        (tape.value(l).data()[0], g)
    };
    let (l0, g0) = loss(base.clone());
    for r in 0..rows {
        if r % seq + 1 < lo {
            assert!(g0[r * vocab..(r + 1) * vocab].iter().all(|&x| x == 0.0));
        }
    }
    let mut moved = base;
    for r in (0..rows).filter(|r| r % seq + 1 < lo) {
        for c in 0..vocab {
            moved[r * vocab + c] += 9.0 * c as f64 - 20.0;
        }
    }
    let (l1, _) = loss(moved);
    assert_eq!(l0.to_bits(), l1.to_bits());
}

#[test]
fn held_out_chunks_are_separate() {
    let ids: Vec<usize> = (0..10 * 17).map(|i| i % 256).collect();
    let chunks = chunk_corpus(&Corpus::from_bytes("mem", &ids.iter().map(|&i| i as u8).collect::<Vec<_>>()), 16).unwrap();
    let (train, held) = split_holdout(chunks.clone(), 3).unwrap();
    assert_eq!((train.len(), held.len()), (7, 3));
    let joined: Vec<TokenSeq> = train.into_iter().chain(held).collect();
    assert_eq!(joined, chunks);
}
