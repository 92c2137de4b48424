use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{path}: {msg}")]
    Ingest { path: PathBuf, msg: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("sequence of {tokens} tokens plus {prompts} prompts exceeds {max} positions")]
    Length {
        tokens: usize,
        prompts: usize,
        max: usize,
    },

    #[error("non-finite loss at step {step}\n{dump}")]
    NonFinite { step: usize, dump: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Input or configuration problems, as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Usage(_)
                | Error::Parse { .. }
                | Error::Validation(_)
                | Error::Ingest { .. }
                | Error::Checkpoint(_)
        )
    }
}
