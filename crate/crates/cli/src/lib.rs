//! Config-driven runner: train, diagnose and ablation suites over the
//! `sinklab` library, writing reports and CSV tables to an output directory.

pub mod ablation;
pub mod config;
pub mod pipeline;

pub use ablation::{format_table, run_ablation_suite, write_table, AblationRow, Suite};
pub use config::{DataConfig, DiagnosticsConfig, ExperimentConfig, OutputConfig};
pub use pipeline::{run_diagnose, run_train, Report};

use sinklab::{Error, ErrorCategory};

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
    }
}
