//! Command-line driver: data generation, training, evaluation, threshold
//! sweeps and report tables.
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical abort, 3 I/O or format
//! error.

pub mod args;
pub mod commands;
mod config;

use std::path::Path;

use clap::error::ErrorKind;
use clap::Parser;

pub use args::{Cli, Command};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] elf::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) | CliError::Format(_) => 3,
            CliError::Core(e) => match e {
                elf::Error::Numerical { .. } => 2,
                elf::Error::Io(_) | elf::Error::Format { .. } | elf::Error::Data(_) => 3,
                elf::Error::Config(_) | elf::Error::Dimension { .. } | elf::Error::State(_) => 1,
            },
        }
    }
}

/// Parses arguments after expanding `--config`, without running anything.
pub fn parse<I, S>(argv: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    Cli::try_parse_from(argv.into_iter().map(Into::into).collect::<Vec<String>>())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a).map(drop),
        Command::Train(a) => commands::train(a).map(drop),
        Command::Eval(a) => commands::eval(a).map(drop),
        Command::Sweep(a) => commands::sweep(a).map(drop),
        Command::Report(a) => commands::report(a).map(drop),
    }
}

/// Full entry point; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let argv = match config::expand(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match parse(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
