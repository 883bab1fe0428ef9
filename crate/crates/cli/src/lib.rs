//! Configuration, commands and evaluation reports behind the `deepebm` binary.

pub mod commands;
pub mod config;
pub mod report;

pub use config::RunConfig;

/// Failures mapped onto process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training aborted: {0}")]
    Aborted(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Aborted(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<deepebm::Error> for CliError {
    fn from(e: deepebm::Error) -> Self {
        use deepebm::Error as E;
        match e {
            E::Config(msg) | E::Usage(msg) => CliError::Config(msg),
            E::Dimension { .. } => CliError::Config(e.to_string()),
            E::NonFinite { .. } => CliError::Aborted(e.to_string()),
            E::Checkpoint(_) => CliError::Checkpoint(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}
