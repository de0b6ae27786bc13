//! `hgnet`: train, evaluate and run the landmark segmentation pipeline.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure
//! (diverged training, failed gradient check).

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hgnet_core::Error;

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "hgnet", version, about = "Landmark-based chest segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model variant into a run directory.
    Train(commands::TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(commands::EvalArgs),
    /// Predict landmarks for a single image.
    Infer(commands::InferArgs),
    /// Generate a synthetic phantom dataset.
    Synth(commands::SynthArgs),
    /// Finite-difference checks over every tape operation.
    Gradcheck(commands::GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.command {
        Command::Train(a) => commands::cmd_train(&a),
        Command::Eval(a) => commands::cmd_eval(&a),
        Command::Infer(a) => commands::cmd_infer(&a),
        Command::Synth(a) => commands::cmd_synth(&a),
        Command::Gradcheck(a) => commands::cmd_gradcheck(&a),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
