use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sinklab::model::ModelConfig;
use sinklab::train::TrainConfig;
use sinklab::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// UTF-8 (or any byte) text file.
    pub corpus: PathBuf,
    /// Chunks held out from the end of the corpus for evaluation.
    #[serde(default = "default_eval_chunks")]
    pub eval_chunks: usize,
}

fn default_eval_chunks() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Sink threshold ε.
    pub epsilon: f64,
    /// Evaluation length T for attention maps and spikes.
    pub eval_seq_len: usize,
    /// Held-out sequences traced.
    pub eval_sequences: usize,
    pub jump: f64,
    pub abs_floor: f64,
    pub rel_factor: f64,
    pub top_k: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            epsilon: 0.3,
            eval_seq_len: 64,
            eval_sequences: 16,
            jump: 10.0,
            abs_floor: 50.0,
            rel_factor: 100.0,
            top_k: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    pub output: OutputConfig,
}

/// Deserialize with the dotted path of the offending field in the message.
pub fn from_toml_value<T: serde::de::DeserializeOwned>(value: toml::Value, origin: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." || path.is_empty() {
            Error::Config(format!("{origin}: {inner}"))
        } else {
            Error::Config(format!("{origin}: at `{path}`: {inner}"))
        }
    })
}

pub fn parse_toml(text: &str, origin: &str) -> Result<toml::Value> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    Ok(toml::Value::Table(table))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = from_toml_value(parse_toml(text, origin)?, origin)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.max_seq {
            return Err(Error::Context {
                len: self.train.seq_len,
                max: self.model.max_seq,
            });
        }
        let d = &self.diagnostics;
        if d.eval_seq_len < 2 || d.eval_seq_len > self.model.max_seq {
            return Err(Error::Config(format!(
                "diagnostics.eval_seq_len must lie in [2, model.max_seq = {}], got {}",
                self.model.max_seq, d.eval_seq_len
            )));
        }
        if d.eval_sequences == 0 || d.top_k == 0 {
            return Err(Error::Config("diagnostics.eval_sequences and top_k must be positive".into()));
        }
        if !(d.jump > 1.0) {
            return Err(Error::Config(format!("diagnostics.jump must exceed 1, got {}", d.jump)));
        }
        if !(d.epsilon.is_finite() && d.abs_floor >= 0.0 && d.rel_factor >= 0.0) {
            return Err(Error::Config("diagnostics thresholds must be finite and non-negative".into()));
        }
        if self.data.eval_chunks == 0 {
            return Err(Error::Config("data.eval_chunks must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
