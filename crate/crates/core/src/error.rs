use thiserror::Error;

#[derive(Debug, Error)]
pub enum TsvcError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// A broken internal invariant, e.g. a value that escaped its histogram range.
    #[error("internal defect: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TsvcError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(TsvcError::InvalidInput(msg.into()))
}
