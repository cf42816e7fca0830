use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up with what an operation requires.
    #[error("shape error: {0}")]
    Shape(String),
    /// Misuse of the recording tape (detached values, repeated backward, ...).
    #[error("tape error: {0}")]
    Tape(String),
    /// Non-finite values or invalid numeric arguments.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Malformed on-disk data (tensor files, checkpoints).
    #[error("format error: {0}")]
    Format(String),
    /// Invalid run or network configuration.
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
