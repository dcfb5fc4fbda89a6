//! Orchestration behind the `dynsl` binary.
//!
//! Each subcommand reads a [`RunConfig`], calls library functions and writes
//! plain-text and CSV files under the output directory. No number is
//! computed here that the library does not expose.

mod commands;
mod config;

pub use commands::{evaluate, fit, load_bundle, predict, report, simulate, test_data, training_data, Bundle, Outcome};
pub use config::{DataConfig, FilePair, RunConfig, SimulatedData, WindowSpec};

use dynsl::DynslError;

/// A failure reported to the user on a single line.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration.
    Usage(String),
    Library(DynslError),
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError::Usage(message.into())
    }

    /// Process exit code.
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Library(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Library(e) => write!(f, "{e} (hint: {})", e.hint()),
        }
    }
}

impl From<DynslError> for CliError {
    fn from(e: DynslError) -> Self {
        CliError::Library(e)
    }
}
