//! `dynslim` command-line tool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynslim::training::Stage;
use dynslim::Error;

#[derive(Debug, Parser)]
#[command(name = "dynslim", version, about = "Dynamically slimmable speech enhancement")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location: a directory for `synth-data` and `train`, a file for
    /// the other commands (stdout when omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus of clean/noisy pairs.
    SynthData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        /// Corpus directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 checkpoint to start stage `dyn` from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from `<out>/last`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Enhance one WAV file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        mode: ModeArgs,
        /// Per-frame routing decisions as CSV (routed runs only).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score a corpus and write per-utterance CSV rows plus their mean.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        mode: ModeArgs,
    },
    /// Mark the cost/quality Pareto front over evaluation CSVs.
    Pareto {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Report MACs per input sample.
    Macs {
        /// Read the model configuration from a checkpoint instead.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "trace")]
        uf: Option<f64>,
        /// Routing trace CSV written by `infer`.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Debug, Clone, Copy, Args)]
#[group(required = true, multiple = false)]
struct ModeArgs {
    /// Run at a fixed utilization factor.
    #[arg(long)]
    uf: Option<f64>,
    /// Let the router choose the width per frame.
    #[arg(long)]
    route: bool,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// 2: usage or configuration, 3: data or files, 4: numerical failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numerical() => 4,
        Error::Config(_) | Error::UnknownUtilization(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Wav(_) | Error::Checkpoint { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
