//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration value (ranges, divisibility, unknown keys).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation contract (shape mismatch, index range).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// Paired corpus has files without a counterpart.
    #[error("corpus has orphan files (no counterpart): {}", .0.join(", "))]
    OrphanFiles(Vec<String>),

    /// Prediction/reference directories disagree on ids.
    #[error("id mismatch between directories: {}", .0.join(", "))]
    IdMismatch(Vec<String>),

    /// A required external resource (e.g. extractor weights) is missing and
    /// the fallback is disallowed.
    #[error("environment error: {0}")]
    Environment(String),

    /// Training hit a non-finite loss; carries the offending batch for diagnosis.
    #[error("training diverged at step {step} (batch ids: {}): {detail}", .batch_ids.join(", "))]
    Diverged {
        step: usize,
        batch_ids: Vec<String>,
        detail: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
