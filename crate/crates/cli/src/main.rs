//! Command-line front end: synthetic data, feature extraction, training,
//! evaluation, prediction and verification.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use slicenet::Error;

use config::RunArgs;

#[derive(Debug, Parser)]
#[command(
    name = "slicenet",
    version,
    about = "Slice-wise ViT features and Bi-LSTM classification of 3D volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic labelled dataset of volumes.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of volumes.
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Edge length of the cubic volumes, in voxels.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Write a randomly initialized encoder manifest.
    InitWeights {
        #[command(flatten)]
        run: RunArgs,
        /// Small encoder (32×32 input, 8-pixel patches, 2 layers, D=32, 4 heads).
        #[arg(long)]
        toy: bool,
    },
    /// Audit a weight manifest against the tensor-name contract.
    InspectWeights {
        #[arg(long, value_name = "PATH")]
        weights: PathBuf,
    },
    /// Run the encoder over a dataset and cache the slice features.
    ExtractFeatures {
        #[command(flatten)]
        run: RunArgs,
    },
    /// K-fold cross-validated training.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Also train on every sample and save the result as model.wman.
        #[arg(long)]
        full: bool,
    },
    /// Score a checkpoint on a dataset or feature cache.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Classify one volume.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "PATH")]
        volume: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Random inputs per check.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also run the end-to-end checks in 32-bit arithmetic.
        #[arg(long)]
        f32_end_to_end: bool,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn run(cli: Cli) -> slicenet::Result<()> {
    match cli.command {
        Command::Synth {
            out,
            samples,
            classes,
            seed,
            size,
        } => commands::synth(&commands::SynthArgs {
            out,
            samples,
            classes,
            seed,
            size,
        }),
        Command::InitWeights { run, toy } => commands::init_weights(&run, toy),
        Command::InspectWeights { weights } => commands::inspect_weights(&weights),
        Command::ExtractFeatures { run } => commands::extract_features(&run),
        Command::Train { run, full } => commands::train(&run, full),
        Command::Evaluate { run, checkpoint } => commands::evaluate_cmd(&run, &checkpoint),
        Command::Predict {
            run,
            volume,
            checkpoint,
        } => commands::predict(&run, &volume, checkpoint.as_deref()),
        Command::Gradcheck {
            seeds,
            seed,
            f32_end_to_end,
            out,
        } => commands::gradcheck(seeds, seed, f32_end_to_end, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
