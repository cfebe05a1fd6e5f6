//! Batch command-line driver: dataset generation, architecture search,
//! retraining, and the analysis suite. All commands are seeded and write a
//! resolved-config echo next to their artifacts so any run can be repeated.

pub mod args;
pub mod artifacts;
pub mod commands;
pub mod config;
pub mod plot;

use clap::Parser;
use std::fmt;

/// Errors mapped onto the exit-code contract: 2 for usage or malformed
/// inputs, 3 for numerical divergence, 1 for unexpected internal failures.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Diverged(String),
    Internal(anyhow::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Diverged(m) => write!(f, "{m}"),
            CliError::Internal(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<unrealnas::datagen::DatagenError> for CliError {
    fn from(e: unrealnas::datagen::DatagenError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<unrealnas::engine::EngineError> for CliError {
    fn from(e: unrealnas::engine::EngineError) -> Self {
        use unrealnas::engine::EngineError as E;
        match e {
            E::Diverged { .. } | E::DivergedTraining { .. } => CliError::Diverged(e.to_string()),
            E::Io { .. } => CliError::Internal(anyhow::Error::new(e)),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<unrealnas::analysis::AnalysisError> for CliError {
    fn from(e: unrealnas::analysis::AnalysisError) -> Self {
        use unrealnas::analysis::AnalysisError as A;
        match e {
            A::Engine(inner) => inner.into(),
            A::AllTrainingsFailed => CliError::Diverged(A::AllTrainingsFailed.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<unrealnas::searchspace::SearchSpaceError> for CliError {
    fn from(e: unrealnas::searchspace::SearchSpaceError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(anyhow::Error::new(e))
    }
}

/// Parses argv and runs the selected command, returning the process exit
/// code. Usage errors detected by clap itself exit directly with code 2.
pub fn run() -> i32 {
    let cli = args::Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
