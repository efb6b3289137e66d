use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed geometry: {0}")]
    MalformedGeometry(String),

    #[error("ambiguous label: {0}")]
    AmbiguousLabel(String),

    #[error("invalid post {id}: {reason}")]
    InvalidPost { id: String, reason: String },

    #[error("record {record}: {reason}")]
    Load { record: String, reason: String },

    #[error("record {record}: dimension mismatch, expected {expected} found {found} ({what})")]
    DimensionMismatch {
        record: String,
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("numeric failure in {op}: non-finite value")]
    Numeric { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn load(record: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Load {
            record: record.into(),
            reason: reason.into(),
        }
    }
}
