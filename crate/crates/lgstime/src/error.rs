//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of two operands are incompatible for the named operation.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A softmax row where every entry sits at the masking constant.
    #[error("softmax: row {row} is fully masked")]
    DegenerateRow { row: usize },

    /// `backward` was called again on a tape that has already been swept.
    #[error("backward called on a consumed tape; rebuild the forward pass first")]
    StaleTape,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("validation: {0}")]
    Validation(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    /// One or more registered verification properties failed.
    #[error("verification failed: {failed} of {total} properties out of tolerance")]
    VerifyFailed { failed: usize, total: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: validation-like failures, I/O failures
    /// and verification failures are kept distinct.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::VerifyFailed { .. } => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_failure_class() {
        let validation = Error::Validation("x".into());
        let io = Error::io("/nope", std::io::Error::from(std::io::ErrorKind::NotFound));
        let verify = Error::VerifyFailed {
            failed: 1,
            total: 16,
        };
        assert_eq!(validation.exit_code(), 2);
        assert_eq!(io.exit_code(), 3);
        assert_eq!(verify.exit_code(), 4);
        assert_eq!(Error::StaleTape.exit_code(), 2);
    }
}
