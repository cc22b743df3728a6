use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {0}")]
    Range(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("pixel ({x}, {y}) is not covered by any tile")]
    Coverage { x: usize, y: usize },

    #[error("non-finite gradient at parameter {index} of {component}")]
    NonFinite { component: String, index: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Codec(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Range(_) => "range",
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::State(_) => "state",
            Error::Coverage { .. } => "coverage",
            Error::NonFinite { .. } => "non_finite",
            Error::Io { .. } => "io",
            Error::Codec(_) => "codec",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code for this error class. Zero is never returned.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } => 3,
            Error::Codec(_) | Error::Json(_) => 4,
            Error::Range(_) | Error::Shape(_) | Error::Domain(_) => 5,
            Error::Contract(_) | Error::State(_) => 6,
            Error::Coverage { .. } => 7,
            Error::NonFinite { .. } => 8,
        }
    }
}
