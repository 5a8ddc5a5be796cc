use thiserror::Error;

/// Errors raised by the model, sampler and inference routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DgpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numerical failure: {message} (last jitter {jitter:e})")]
    NumericalFailure { message: String, jitter: f64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),
}

impl DgpError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DgpError::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>, jitter: f64) -> Self {
        DgpError::NumericalFailure {
            message: msg.into(),
            jitter,
        }
    }
}

pub type Result<T> = std::result::Result<T, DgpError>;
