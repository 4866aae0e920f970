use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Two fields or arrays do not have compatible shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A stateful object was used out of sequence (stale field, missing snapshot).
    #[error("state error: {0}")]
    State(String),
    /// A run configuration violates an invariant.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// An input is too large for the requested exact method.
    #[error("size error: {0}")]
    Size(String),
    /// Malformed binary or text data.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
