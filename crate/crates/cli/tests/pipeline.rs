use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use sinklab::data::synthetic_text;
use sinklab::model::checkpoint;
use sinklab::train::position_weights;
use sinklab_cli::{format_table, run_ablation_suite, run_diagnose, run_train, write_table, ExperimentConfig, Suite};

fn config_text(corpus: &Path, out: &Path) -> String {
    format!(
        r#"
[model]
n_layers = 2
d_model = 16
n_heads = 2
d_head = 8
d_ffn = 32
vocab_size = 256
max_seq = 32
norm_kind = "pre_norm"
ffn_kind = "swiglu"

[train]
base_lr = 5e-3
min_lr_ratio = 0.1
warmup_steps = 4
total_steps = 20
weight_decay = 0.1
betas = [0.9, 0.95]
eps = 1e-8
grad_clip = 1.0
batch_tokens = 64
seq_len = 16
loss_pos_min = 1
loss_pos_max = 16
seed = 11
checkpoint_every = 10

[data]
corpus = "{}"
eval_chunks = 8

[diagnostics]
eval_seq_len = 32
eval_sequences = 4

[output]
dir = "{}"
"#,
        corpus.display(),
        out.display()
    )
}

struct Fixture {
    dir: tempfile::TempDir,
    corpus: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.txt");
        fs::write(&corpus, synthetic_text(40_000, 1)).unwrap();
        Fixture { dir, corpus }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, out: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&config_text(&self.corpus, &self.path(out)), "test").unwrap()
    }

    fn write_config(&self, name: &str, out: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, config_text(&self.corpus, &self.path(out))).unwrap();
        p
    }
}

#[test]
fn train_report_is_populated_and_deterministic() {
    let fx = Fixture::new();
    let a = run_train(&fx.config("a")).unwrap();
    let b = run_train(&fx.config("b")).unwrap();
    assert!(a.perplexity.unwrap().is_finite() && a.perplexity.unwrap() < 256.0);
    assert!((0.0..=1.0).contains(&a.sink_ratio.unwrap()));
    assert!(a.spike.unwrap() > 0.0);
    for key in ["checkpoint", "metrics", "report", "checkpoint_000", "checkpoint_001"] {
        assert!(fx.path("a").join(&a.artifacts[key]).exists(), "{key}");
    }
    assert_eq!(a, b);
    for f in ["model.ckpt", "report.json", "metrics.jsonl"] {
        assert_eq!(fs::read(fx.path("a").join(f)).unwrap(), fs::read(fx.path("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn diagnose_is_idempotent_and_monotone_in_epsilon() {
    let fx = Fixture::new();
    let cfg = fx.config("train");
    run_train(&cfg).unwrap();
    let ckpt = fx.path("train").join("model.ckpt");
    let diag = |out: &str, eps: f64| {
        let mut d = cfg.diagnostics.clone();
        d.epsilon = eps;
        run_diagnose(&ckpt, Some(&cfg.model), &fx.corpus, 8, &d, &fx.path(out)).unwrap()
    };
    let first = diag("d1", 0.3);
    let second = diag("d2", 0.3);
    assert_eq!(first, second);
    for (key, rel) in &first.artifacts {
        assert_eq!(
            fs::read(fx.path("d1").join(rel)).unwrap(),
            fs::read(fx.path("d2").join(rel)).unwrap(),
            "{key}"
        );
    }
    for key in ["magnitude_trace", "frobenius", "eigen_spectrum", "sink_scores", "sinks", "spikes", "quadratic"] {
        assert!(first.artifacts.contains_key(key), "{key}");
    }
    let header = fs::read_to_string(fx.path("d1").join(&first.artifacts["frobenius"])).unwrap();
    assert!(header.lines().next().unwrap().contains("frobenius"));

    let loose = diag("d3", 0.05);
    assert!(loose.sink_ratio.unwrap() >= first.sink_ratio.unwrap());
}

#[test]
fn zero_weight_checkpoint_has_no_sinks() {
    let fx = Fixture::new();
    let cfg = fx.config("zero");
    let mut params = sinklab::model::Parameters::init(&cfg.model, 0).unwrap();
    for (_, t) in params.fields_mut() {
        t.data_mut().fill(0.0);
    }
    let ckpt = fx.path("zero.ckpt");
    checkpoint::save(&ckpt, &params, &cfg.model).unwrap();
    let mut d = cfg.diagnostics.clone();
    d.eval_seq_len = 32;
    let report = run_diagnose(&ckpt, None, &fx.corpus, 8, &d, &fx.path("zero")).unwrap();
    assert_eq!(report.sink_ratio, Some(0.0));
    // uniform logits
    assert!((report.perplexity.unwrap() - 256.0).abs() < 1e-9);
}

#[test]
fn diagnose_rejects_a_mismatched_config() {
    let fx = Fixture::new();
    let cfg = fx.config("x");
    let params = sinklab::model::Parameters::init(&cfg.model, 0).unwrap();
    let ckpt = fx.path("x.ckpt");
    checkpoint::save(&ckpt, &params, &cfg.model).unwrap();
    let mut other = cfg.model.clone();
    other.d_ffn = 48;
    let err = run_diagnose(&ckpt, Some(&other), &fx.corpus, 8, &cfg.diagnostics, &fx.path("x")).unwrap_err();
    assert!(matches!(err, sinklab::Error::Container(_)), "{err}");
}

fn suite_text(fx: &Fixture, variants: &str) -> String {
    let base = config_text(&fx.corpus, &fx.path("suite"));
    let mut out = String::new();
    for line in base.lines() {
        if let Some(section) = line.strip_prefix('[') {
            out.push_str(&format!("[base.{section}\n"));
        } else {
            out.push_str(line);
            out.push('\n');
        }
    }
    out.push_str(variants);
    out
}

#[test]
fn ablation_table_has_one_row_per_setup() {
    let fx = Fixture::new();
    let text = suite_text(
        &fx,
        r#"
[[variant]]
name = "sandwich"
[variant.delta.model]
norm_kind = "sandwich"

[[variant]]
name = "dynamic_tanh"
[variant.delta.model]
norm_kind = "dynamic_tanh"

[[variant]]
name = "broken"
[variant.delta.data]
corpus = "/nonexistent/corpus.txt"
"#,
    )
    .replacen("[base.model]", "baseline = \"pre_norm\"\n[base.model]", 1);
    let suite = Suite::from_toml_str(&text, "suite").unwrap();
    let rows = run_ablation_suite(&suite, |_| {}).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.setup.as_str()).collect();
    assert_eq!(names, ["pre_norm", "sandwich", "dynamic_tanh", "broken"]);
    assert!(rows[..3].iter().all(|r| r.error.is_none() && r.perplexity.is_some()));
    assert!(rows[3].error.is_some() && rows[3].perplexity.is_none());
    assert!(fx.path("suite/sandwich/model.ckpt").exists());

    let table = format_table(&rows);
    let header = table.lines().next().unwrap();
    for col in ["Setup", "Perplexity", "SinkRatio", "Spike"] {
        assert!(header.contains(col), "{header}");
    }
    let (csv, txt) = write_table(&fx.path("suite"), &rows).unwrap();
    assert!(fs::read_to_string(csv).unwrap().starts_with("setup,perplexity,sink_ratio,spike"));
    assert_eq!(fs::read_to_string(txt).unwrap(), table);
}

#[test]
fn empty_suite_is_baseline_only() {
    let fx = Fixture::new();
    let suite = Suite::from_toml_str(&suite_text(&fx, ""), "suite").unwrap();
    assert_eq!(suite.setup_names(), ["baseline"]);
    let rows = run_ablation_suite(&suite, |_| {}).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].error.is_none());
}

#[test]
fn context_length_deltas_reach_the_loss_mask() {
    let fx = Fixture::new();
    let text = suite_text(
        &fx,
        r#"
[[variant]]
name = "ctx_8_16"
[variant.delta.train]
loss_pos_min = 8
"#,
    );
    let suite = Suite::from_toml_str(&text, "suite").unwrap();
    let full = suite.resolve("baseline").unwrap();
    let late = suite.resolve("ctx_8_16").unwrap();
    assert_eq!(full.train.pos_range(), (1, 16));
    assert_eq!(late.train.pos_range(), (8, 16));
    let a = position_weights(1, 16, full.train.pos_range()).unwrap();
    let b = position_weights(1, 16, late.train.pos_range()).unwrap();
    assert!(a.iter().all(|&w| w == 1.0 / 16.0));
    assert!(b[..7].iter().all(|&w| w == 0.0) && b[7..].iter().all(|&w| w == 1.0 / 9.0));
    assert_eq!(late.output.dir, fx.path("suite").join("ctx_8_16"));
}

#[test]
fn unknown_keys_in_a_delta_are_rejected() {
    let fx = Fixture::new();
    let text = suite_text(
        &fx,
        r#"
[[variant]]
name = "typo"
[variant.delta.model]
norm_knd = "sandwich"
"#,
    );
    let err = Suite::from_toml_str(&text, "suite").unwrap_err().to_string();
    assert!(err.contains("norm_knd"), "{err}");
}

fn sinklab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sinklab"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let fx = Fixture::new();
    let good = fx.write_config("good.toml", "cli");
    let out = sinklab(&["train", "--config", good.to_str().unwrap(), "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["perplexity"].as_f64().is_some());

    let ckpt = fx.path("cli/model.ckpt");
    let out = sinklab(&[
        "diagnose",
        "--config",
        good.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        fx.path("cli_diag").to_str().unwrap(),
        "--epsilon",
        "0.1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fx.path("cli_diag/sink_scores.csv").exists());

    let bad = fx.path("bad.toml");
    fs::write(&bad, config_text(&fx.corpus, &fx.path("x")).replace("seed = 11", "seed = 11\nsede = 3")).unwrap();
    let out = sinklab(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));

    let out = sinklab(&["train", "--config", good.to_str().unwrap(), "--eval-seq-len", "64"]);
    assert_eq!(out.status.code(), Some(2));

    let missing = fx.path("missing.toml");
    fs::write(&missing, config_text(&fx.path("nope.txt"), &fx.path("y"))).unwrap();
    let out = sinklab(&["train", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = ExperimentConfig::load(&dir.join("desk.toml")).unwrap();
    desk.validate().unwrap();
    assert_eq!(desk.model, sinklab::model::ModelConfig::default());
    let suite = Suite::load(&dir.join("norm_ablation.toml")).unwrap();
    assert_eq!(suite.setup_names(), ["pre_norm", "sandwich", "dynamic_tanh", "context_32_64"]);
    assert_eq!(suite.resolve("context_32_64").unwrap().train.pos_range(), (32, 64));
}
