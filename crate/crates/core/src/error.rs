use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GalaError {
    #[error("degenerate embedding: vector has zero norm")]
    DegenerateEmbedding,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty instance: mask has no foreground pixels")]
    EmptyInstance,

    #[error("degenerate homography")]
    DegenerateHomography,

    #[error("mask erosion emptied the mask after {0} retries")]
    ErosionExhausted(usize),

    #[error("placement module required: background query has no box")]
    PlacementRequired,

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("empty index")]
    EmptyIndex,

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("weights fingerprint {found} does not match config fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("training diverged at step {step} ({stage} stage)")]
    Divergence { step: usize, stage: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl GalaError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        GalaError::Invalid(msg.into())
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        GalaError::Format {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GalaError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = GalaError> = std::result::Result<T, E>;
