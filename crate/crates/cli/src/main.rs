mod args;
mod commands;
mod config;
mod render;

use std::process::ExitCode;

use clap::Parser;
use sfuda_core::Error;

use args::{Cli, Command};

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Config(_) | Error::Generation(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Numerical(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::TrainSource(a) => commands::train_source_cmd(a),
        Command::Adapt(a) => commands::adapt(a),
        Command::Ablation(a) => commands::ablation(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::PseudoLabels(a) => commands::pseudo_labels(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
