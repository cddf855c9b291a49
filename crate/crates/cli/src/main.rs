//! `merge-stream`: train the synthetic bench task, merge and stream
//! checkpoints, score the results, run the verification oracles, and emit
//! report tables. One command per process; every artifact-producing command
//! leaves a manifest that `replay` can re-execute and check byte-for-byte.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use mergestream::{Error, Result};

use config::{parse_convention, parse_operator, RunConfig};

const EXIT_HELP: &str = "Exit codes:
  0  success
  1  verification failure (oracle assertion or replay mismatch)
  2  invalid configuration or missing input
  3  io failure
  4  container or manifest format violation
  5  shape mismatch
  6  non-finite values or non-converging numerics
  7  empty or insufficient data";

#[derive(Parser)]
#[command(
    name = "merge-stream",
    version,
    about = "Streaming checkpoint merging on a desk-scale synthetic bench",
    after_help = EXIT_HELP
)]
struct Cli {
    /// Sectioned TOML config; defaults are used when omitted
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the train and stream seeds together
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads; 1 guarantees bit-determinism, default is automatic.
    /// Env fallback: MERGE_STREAM_THREADS
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Override the blend weight
    #[arg(long, global = true, value_name = "X")]
    lambda: Option<f64>,

    /// Override the merge operator: ta, ties, dare, arm
    #[arg(long, global = true, value_name = "OP")]
    operator: Option<String>,

    /// Override the window denominator convention: eq1, appendix
    #[arg(long, global = true, value_name = "CONV")]
    convention: Option<String>,

    /// Override the output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the bench model, snapshotting checkpoints as it goes
    Train,
    /// Merge the input checkpoints once with the configured operator
    Merge,
    /// Run the iterated merging schedule over the input checkpoints
    Stream,
    /// Score a checkpoint on the configured dataset split
    Eval {
        /// Checkpoint to score; falls back to [eval] checkpoint
        checkpoint: Option<PathBuf>,
    },
    /// Run the closed-form verification suite and write its report
    Oracle,
    /// Emit CSV tables from a directory holding a finished stream run
    Report,
    /// Re-execute a manifest and check every artifact is byte-identical
    Replay {
        /// Path to the manifest.json of a previous run
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
    },
}

fn exit_class(err: &Error) -> (i32, &'static str) {
    match err {
        Error::Config(_) => (2, "invalid-config"),
        Error::Io(_) => (3, "io-failure"),
        Error::FormatViolation(_) => (4, "format-violation"),
        Error::ShapeMismatch(_) | Error::InvalidShape(_) => (5, "shape-mismatch"),
        Error::NonFinite(_) | Error::ZeroVector | Error::ConvergenceFailure { .. } => {
            (6, "non-finite")
        }
        Error::Empty(_) | Error::InsufficientData(_) => (7, "insufficient-data"),
    }
}

fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("MERGE_STREAM_THREADS") {
        Ok(raw) => raw.trim().parse::<usize>().map(Some).map_err(|_| {
            Error::Config(format!("MERGE_STREAM_THREADS must be an integer, got {raw:?}"))
        }),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("MERGE_STREAM_THREADS: {e}"))),
    }
}

fn run(cli: Cli) -> Result<i32> {
    if let Some(n) = resolve_threads(cli.threads)? {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // A global pool can only be installed once per process; a second
        // attempt (from tests driving `run` twice) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    if let Cmd::Replay { manifest } = &cli.command {
        return commands::cmd_replay(manifest);
    }

    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.stream.seed = seed;
    }
    if let Some(lambda) = cli.lambda {
        cfg.stream.lambda = lambda;
    }
    if let Some(op) = &cli.operator {
        cfg.stream.operator = parse_operator(op)?;
    }
    if let Some(conv) = &cli.convention {
        cfg.stream.convention = parse_convention(conv)?;
    }
    if let Some(out) = &cli.out {
        cfg.io.out_dir = out.display().to_string();
    }

    match &cli.command {
        Cmd::Train => commands::cmd_train(&cfg),
        Cmd::Merge => commands::cmd_merge(&cfg),
        Cmd::Stream => commands::cmd_stream(&cfg),
        Cmd::Eval { checkpoint } => commands::cmd_eval(&cfg, checkpoint.as_deref()),
        Cmd::Oracle => commands::cmd_oracle(&cfg),
        Cmd::Report => commands::cmd_report(&cfg),
        Cmd::Replay { .. } => unreachable!("replay returns before config resolution"),
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            let (code, kind) = exit_class(&err);
            let payload =
                serde_json::json!({ "error": err.to_string(), "kind": kind, "exit": code });
            eprintln!("{payload}");
            code
        }
    };
    std::process::exit(code);
}
