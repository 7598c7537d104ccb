use thiserror::Error;

/// Failure modes shared by every estimator in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// The operation refuses to run because its mathematical hypothesis fails.
    #[error("refused: {0}")]
    Refused(String),
    /// A sampler or iteration gave up.
    #[error("aborted: {0}")]
    Aborted(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Contract(msg.into()))
}
