//! Subcommands of the `humansense` binary, callable in-process.

pub mod args;
pub mod commands;
pub mod manifest;
pub mod outdir;

use std::fmt;
use std::process::ExitCode;

pub use args::{Cli, Command};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or flag combinations.
    Usage(String),
    Core(humansense::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(humansense::Error::NonFinite { .. }) => 4,
            CliError::Core(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<humansense::Error> for CliError {
    fn from(e: humansense::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => commands::generate::run(&a).map(drop),
        Command::Train(a) => commands::train::run(&a).map(drop),
        Command::Eval(a) => commands::eval::run(&a).map(drop),
        Command::Ablate(a) => commands::ablate::run(&a).map(drop),
        Command::Infer(a) => commands::infer::run(&a).map(drop),
    }
}

pub fn exit_code(result: &CliResult<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => ExitCode::from(e.exit_code()),
    }
}
