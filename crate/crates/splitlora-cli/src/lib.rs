//! Library side of the `splitlora` command line tool: experiment
//! configuration handling and the three subcommand implementations.

pub mod commands;
pub mod config;

use std::fmt;

/// Failures split by exit code: configuration problems exit 2, execution
/// problems exit 3.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Runtime(msg) => write!(f, "error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Library failure surfaced while interpreting configuration.
pub fn config_err(e: impl fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Library or I/O failure surfaced during execution.
pub fn runtime_err(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}
