use std::path::PathBuf;

use gkdr_emulation::EmulationError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, files or configuration (exit code 2).
    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Emulation(#[from] EmulationError),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError::Usage(message.into())
    }

    pub fn parse(path: &std::path::Path, message: impl std::fmt::Display) -> Self {
        CliError::Parse { path: path.to_path_buf(), message: message.to_string() }
    }

    /// 2 for usage and validation problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Emulation(e) if !e.is_validation() => 3,
            _ => 2,
        }
    }
}
