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

    #[error("i/o error: {0}")]
    Stream(#[from] std::io::Error),

    #[error("{file}: {rejected} of {lines} lines rejected (limit {limit}); first: {first}")]
    TooManyRejects {
        file: String,
        rejected: usize,
        lines: usize,
        limit: usize,
        first: String,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("AUC undefined: {0}")]
    AucUndefined(String),

    #[error("empty intersection between prediction sets")]
    EmptyIntersection,

    #[error("backward already called on this forward record")]
    TapeConsumed,

    #[error("non-finite gradient in {param} (epoch {epoch}, batch {batch})")]
    NonFiniteGradient {
        param: String,
        epoch: usize,
        batch: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error in {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("checkpoint vocabulary mismatch for field {field}: checkpoint {expected}, data {actual}")]
    VocabMismatch {
        field: String,
        expected: String,
        actual: String,
    },

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

    pub fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub fn shape(context: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Shape {
            context,
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    /// True for failures caused by a metric that cannot be computed on the given data.
    pub fn is_undefined_metric(&self) -> bool {
        matches!(self, Error::AucUndefined(_) | Error::EmptyIntersection)
    }
}
