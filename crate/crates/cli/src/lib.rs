//! Subcommand implementations behind the `ecore` binary.

pub mod commands;
pub mod config;

use ecore::autodiff::AutodiffError;

pub use config::{DataConfig, EvalConfig, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ecore::Error),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    /// 2 for configuration, usage and I/O problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(ecore::Error::NonFinite(_))
            | CliError::Core(ecore::Error::Autodiff(AutodiffError::NonFinite { .. }))
            | CliError::GradCheck(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
