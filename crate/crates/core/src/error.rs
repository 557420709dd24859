use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the kit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {axis}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        axis: String,
        expected: String,
        got: String,
    },

    #[error("{op}: non-finite value in {what}")]
    NonFinite { op: &'static str, what: String },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("no registered forward trace for {0}")]
    UnregisteredTrace(String),

    #[error("tape: {0}")]
    Tape(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite loss at step {step} (first offending parameter: {param})")]
    Diverged { step: usize, param: String },

    #[error("{0}: function gave different values for the same input")]
    NonDeterministic(&'static str),

    #[error("format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, axis: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            axis: axis.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
