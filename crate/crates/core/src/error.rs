use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed image {path}: {reason}")]
    MalformedImage { path: PathBuf, reason: String },

    #[error("unsupported bit depth in {path}: maxval {maxval}")]
    UnsupportedBitDepth { path: PathBuf, maxval: u32 },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("expected value space {expected}, got {actual}")]
    ValueSpace {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad input data (as opposed to a bad
    /// configuration). The CLI maps this onto its exit codes.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::MalformedImage { .. }
                | Error::UnsupportedBitDepth { .. }
                | Error::UnsupportedFormat(_)
                | Error::Data(_)
                | Error::Checkpoint(_)
                | Error::Shape(_)
                | Error::Json(_)
        )
    }
}
