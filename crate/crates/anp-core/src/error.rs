//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum AnpError {
    /// A value or shape violates an operation's mathematical preconditions.
    #[error("domain error: {0}")]
    Domain(String),
    /// A configuration (mask, attack spec, hyperparameter) is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// A file or byte stream does not match its declared format.
    #[error("format error: {0}")]
    Format(String),
    /// A computation produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// The operation is not defined for this architecture.
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnpError>;

impl AnpError {
    pub fn domain(msg: impl Into<String>) -> Self {
        AnpError::Domain(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        AnpError::Config(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        AnpError::Format(msg.into())
    }
}
