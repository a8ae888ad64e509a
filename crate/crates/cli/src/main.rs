//! `actseg`: synthetic data, evaluation, pseudo-labeling, training, inference
//! and plotting for segment-level action segmentation.
//!
//! Exit codes: 0 success, 1 usage or invalid input, 2 I/O or file format,
//! 3 numeric failure.

mod common;
mod eval;
mod infer;
mod plot;
mod pseudolabel;
mod synth;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use common::Failure;

#[derive(Parser, Debug)]
#[command(
    name = "actseg",
    version,
    about = "Segment-level temporal action segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with ground truth and timestamps.
    Synth(synth::Args),
    /// Score predicted label files against ground truth.
    Eval(eval::Args),
    /// Turn timestamp annotations into pseudo-segmentations.
    Pseudolabel(pseudolabel::Args),
    /// Train stage 1 (encoder and decoder) or stage 2 (alignment decoder).
    Train(train::Args),
    /// Predict transcripts and durations with a trained checkpoint.
    Infer(infer::Args),
    /// Draw segmentations as colored bars in an SVG file.
    Plot(plot::Args),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Pseudolabel(a) => pseudolabel::run(a),
        Command::Train(a) => train::run(a),
        Command::Infer(a) => infer::run(a),
        Command::Plot(a) => plot::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

impl From<actseg::Error> for Failure {
    fn from(e: actseg::Error) -> Self {
        use actseg::Error as E;
        match e {
            E::Io { .. } | E::Format { .. } => Failure::Io(e.to_string()),
            E::Numeric(_) | E::DecodeOverflow(_) => Failure::Numeric(e.to_string()),
            E::InvalidArgument(_) | E::Infeasible(_) => Failure::Usage(e.to_string()),
        }
    }
}
