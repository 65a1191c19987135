use std::fmt;

use thiserror::Error;

/// Errors raised anywhere in the search/training stack.
///
/// Every variant maps onto a short [`ErrorCategory`] so command-line front
/// ends can report failures as a single machine-parseable token.
#[derive(Debug, Error)]
pub enum NasError {
    #[error("structural error: {0}")]
    Structural(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Structural,
    Argument,
    Numerical,
    Config,
    Data,
    Parse,
    Io,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Structural => "structural",
            ErrorCategory::Argument => "argument",
            ErrorCategory::Numerical => "numerical",
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Parse => "parse",
            ErrorCategory::Io => "io",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl NasError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            NasError::Structural(_) => ErrorCategory::Structural,
            NasError::Argument(_) => ErrorCategory::Argument,
            NasError::Numerical(_) => ErrorCategory::Numerical,
            NasError::Config(_) => ErrorCategory::Config,
            NasError::Data(_) => ErrorCategory::Data,
            NasError::Parse(_) => ErrorCategory::Parse,
            NasError::Io(_) => ErrorCategory::Io,
        }
    }

    pub fn structural(msg: impl Into<String>) -> Self {
        NasError::Structural(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        NasError::Argument(msg.into())
    }
}

pub type Result<T, E = NasError> = std::result::Result<T, E>;
