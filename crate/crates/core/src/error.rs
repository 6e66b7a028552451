use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad configuration or API misuse.
    Usage,
    /// Unreadable, malformed or insufficient input data.
    Data,
    /// Non-finite values or other numeric breakdown.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: format error: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("unusable instance: {0}")]
    Instance(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Contract(_) => ErrorCategory::Usage,
            Error::Numeric(_) => ErrorCategory::Numeric,
            Error::Dimension { .. }
            | Error::InvalidMask(_)
            | Error::Input(_)
            | Error::Parse { .. }
            | Error::Format { .. }
            | Error::Sampling(_)
            | Error::Instance(_)
            | Error::Checkpoint(_)
            | Error::Io { .. } => ErrorCategory::Data,
        }
    }
}
