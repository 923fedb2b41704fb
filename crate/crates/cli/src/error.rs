use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input hash mismatch for {what}: expected {expected}, found {actual}")]
    HashMismatch { what: String, expected: String, actual: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] hetpref_core::Error),
}

impl CliError {
    /// 2 config, 3 input hash mismatch, 4 convergence failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use hetpref_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => 2,
            CliError::HashMismatch { .. } | CliError::Core(E::HashMismatch { .. }) => 3,
            CliError::Core(E::Convergence { .. } | E::StepSize { .. }) => 4,
            _ => 1,
        }
    }
}
