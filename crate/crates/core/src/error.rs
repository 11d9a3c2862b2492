use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate softmax row {row}: every entry is masked")]
    DegenerateRow { row: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_seq {max}")]
    Context { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    Vocab { id: usize, vocab: usize },
    #[error("wrong block kind: {0}")]
    Kind(String),
    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },
    #[error("corpus too short: {tokens} tokens, need at least {needed}")]
    EmptyCorpus { tokens: usize, needed: usize },
    #[error("checkpoint container error: {0}")]
    Container(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Context { .. } | Error::Kind(_) => ErrorCategory::Config,
            Error::Vocab { .. }
            | Error::EmptyCorpus { .. }
            | Error::Container(_)
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::Json(_) => ErrorCategory::Data,
            Error::Dimension(_)
            | Error::DegenerateRow { .. }
            | Error::Contract(_)
            | Error::Convergence { .. }
            | Error::NonFinite { .. } => ErrorCategory::Numeric,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
