use thiserror::Error;

/// Errors raised by the emulation library.
#[derive(Debug, Error)]
pub enum EmulationError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("serialization failed: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EmulationError>;

impl EmulationError {
    /// True for errors caused by the caller's inputs rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            EmulationError::InvalidInput(_)
                | EmulationError::InvalidConfig(_)
                | EmulationError::Degenerate(_)
                | EmulationError::Serialization(_)
        )
    }
}
