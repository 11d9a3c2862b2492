use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sinklab::Result;
use sinklab_cli::{
    exit_code, format_table, run_ablation_suite, run_diagnose, run_train, write_table, ExperimentConfig, Suite,
};

#[derive(Parser)]
#[command(name = "sinklab", version, about = "Train and probe small transformers for attention sinks and massive activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Output directory (replaces `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed (replaces `train.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Sink threshold (replaces `diagnostics.epsilon`).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Evaluation sequence length (replaces `diagnostics.eval_seq_len`).
    #[arg(long)]
    eval_seq_len: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.epsilon {
            cfg.diagnostics.epsilon = e;
        }
        if let Some(t) = self.eval_seq_len {
            cfg.diagnostics.eval_seq_len = t;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run every diagnostic on a checkpoint.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train a baseline and its variants and tabulate the results.
    Ablate {
        /// Suite file: `[base]` experiment plus `[[variant]]` deltas.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn load(path: &PathBuf, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    o.apply(&mut cfg);
    if let Some(out) = &o.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let report = run_train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Diagnose {
            config,
            checkpoint,
            overrides,
        } => {
            let cfg = load(&config, &overrides)?;
            let report = run_diagnose(
                &checkpoint,
                Some(&cfg.model),
                &cfg.data.corpus,
                cfg.data.eval_chunks,
                &cfg.diagnostics,
                &cfg.output.dir,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate { config, overrides } => {
            let suite = Suite::load(&config)?;
            let dir = match &overrides.out {
                Some(d) => d.clone(),
                None => suite.output_dir()?,
            };
            let rows = run_ablation_suite(&suite, |cfg| {
                overrides.apply(cfg);
                if let Some(out) = &overrides.out {
                    let name = cfg.output.dir.file_name().map(PathBuf::from).unwrap_or_default();
                    cfg.output.dir = out.join(name);
                }
            })?;
            write_table(&dir, &rows)?;
            print!("{}", format_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
