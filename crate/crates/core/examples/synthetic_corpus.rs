//! Write the deterministic English-like training corpus.
//!
//! `cargo run --release --example synthetic_corpus -- corpus.txt 2000000 7`

use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(path) = args.first() else {
        eprintln!("usage: synthetic_corpus <path> [bytes] [seed]");
        return ExitCode::from(2);
    };
    let bytes = args.get(1).map_or(Ok(2_000_000), |s| s.parse());
    let seed = args.get(2).map_or(Ok(7), |s| s.parse());
    let (Ok(bytes), Ok(seed)) = (bytes, seed) else {
        eprintln!("bytes and seed must be non-negative integers");
        return ExitCode::from(2);
    };
    if let Err(e) = std::fs::write(path, sinklab::data::synthetic_text(bytes, seed)) {
        eprintln!("{path}: {e}");
        return ExitCode::from(3);
    }
    ExitCode::SUCCESS
}
