//! Command-line entry point for the whole pipeline: corpus synthesis,
//! training, evaluation, margin sweeps, gradient checking and filter
//! export.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/format error, 4 gradient
//! check over threshold.

mod commands;
mod spec_file;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use amsincnet_core::gradcheck::CheckSize;
use amsincnet_core::signal::Split;

#[derive(Parser)]
#[command(
    name = "amsincnet",
    version,
    about = "Sinc filter-bank speaker recognition with an additive-margin softmax head"
)]
struct Cli {
    /// Cap the number of worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic speaker corpus (WAV files + manifest.csv)
    Synth {
        /// Corpus spec file (key=value)
        #[arg(long)]
        spec: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a corpus directory
    Train {
        /// Training config file (key=value)
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory with manifest.csv
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metrics and checkpoints
        #[arg(long)]
        out: PathBuf,
        /// Override the loss head
        #[arg(long, value_parser = ["softmax", "am"])]
        loss: Option<String>,
        /// Override the additive margin m
        #[arg(long)]
        margin: Option<f64>,
        /// Resume from a checkpoint (config fingerprint must match)
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: prints FER/loss as one CSV row
    Eval {
        /// Checkpoint path (reads its .config sidecar)
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus directory with manifest.csv
        #[arg(long)]
        data: PathBuf,
        /// Which split to evaluate
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
    },
    /// Train the baseline plus one run per margin in the given range
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Margin range start:end:step (inclusive), empty for baseline only
        #[arg(long)]
        margins: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every gradient path
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        size: String,
        /// Worst acceptable relative error
        #[arg(long, default_value_t = amsincnet_core::gradcheck::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Export sinc filter taps and frequency responses as CSV
    ExportFilters {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Synth { spec, out } => commands::synth(&spec, &out),
        Command::Train {
            config,
            data,
            out,
            loss,
            margin,
            resume,
        } => commands::train(commands::TrainArgs {
            config,
            data,
            out,
            loss,
            margin,
            resume,
        }),
        Command::Eval { ckpt, data, split } => {
            let split = if split == "train" { Split::Train } else { Split::Test };
            commands::eval(&ckpt, &data, split)
        }
        Command::Sweep {
            config,
            margins,
            data,
            out,
        } => match commands::parse_margin_range(&margins) {
            Some(m) => commands::sweep(&config, &m, &data, &out),
            None => {
                eprintln!("error: malformed --margins range {margins:?}, expected start:end:step");
                return ExitCode::from(2);
            }
        },
        Command::Gradcheck { size, threshold } => match CheckSize::parse(&size) {
            Some(s) => commands::gradcheck_cmd(s, threshold),
            None => {
                eprintln!("error: unknown --size {size:?}, expected tiny|small");
                return ExitCode::from(2);
            }
        },
        Command::ExportFilters { ckpt, out } => commands::export_filters(&ckpt, &out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
