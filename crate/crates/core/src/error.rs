use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke an API contract (non-scalar loss, missing gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad numeric input such as a degenerate box or a non-binary target.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    /// Malformed encoded data (RLE counts, checkpoint bytes, image headers).
    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// Annotation content that parses but violates a mask invariant.
    #[error("data error in annotation {instance_id}: {message}")]
    Data { instance_id: u64, message: String },

    /// The training loss stopped being a finite number.
    #[error("non-finite loss at iteration {iteration}")]
    Diverged { iteration: u64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
