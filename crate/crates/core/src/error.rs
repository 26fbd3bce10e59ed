use thiserror::Error;

use crate::ClassId;

pub type Result<T, E = PrismError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PrismError {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Input that is valid in type but numerically degenerate (zero norm, no
    /// preferred direction, collapsed activations).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// The class has no statistics available. Callers in the filtering path
    /// resolve this to the first-seen rule.
    #[error("class {0} has no statistics")]
    AbsentClass(ClassId),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PrismError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Self::Domain(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Self::Degenerate(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(PrismError::DimensionMismatch { expected, got })
    }
}
