use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("parse error in `{path}` at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("malformed file `{path}`: {message}")]
    Format { path: PathBuf, message: String },

    #[error("unknown concept `{concept}` (missing tokens: {})", missing.join(", "))]
    UnknownConcept {
        concept: String,
        missing: Vec<String>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mask is empty at feature resolution")]
    EmptyMask,

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty result: {0}")]
    Empty(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("image error on `{path}`: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Format { .. } => "format",
            Error::UnknownConcept { .. } => "unknown_concept",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::EmptyMask => "empty_mask",
            Error::ZeroVector => "zero_vector",
            Error::Unsupported(_) => "unsupported",
            Error::NotFound(_) => "not_found",
            Error::NonFinite(_) => "non_finite",
            Error::Empty(_) => "empty",
            Error::Undefined(_) => "undefined",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }
}
