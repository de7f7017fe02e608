//! `dualvit` command-line tool.
//!
//! Exit status: 0 on success, 1 when a computation fails, 2 for invalid
//! input (arguments, configs, manifests, images, checkpoints).

mod commands;
mod config;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;

#[derive(Debug)]
pub enum CliError {
    /// Bad user input; exit status 2.
    Input(String),
    /// Failure while computing; exit status 1.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<dualvit::Error> for CliError {
    fn from(e: dualvit::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = commands::Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
