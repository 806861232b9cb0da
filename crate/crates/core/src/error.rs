use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("degenerate vector: {0}")]
    DegenerateVector(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("corrupt file {path}: field `{field}`: {detail}")]
    CorruptFile {
        path: PathBuf,
        field: &'static str,
        detail: String,
    },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("row {row} is not a probability distribution (sum {sum})")]
    InvalidDistribution { row: usize, sum: f64 },

    #[error("pairwise loss needs at least two samples, got {0}")]
    NoPairs(usize),

    #[error("invalid code entry {value} at ({row}, {col}); expected +1 or -1")]
    InvalidCode { row: usize, col: usize, value: f64 },

    #[error("empty ranking")]
    EmptyRanking,

    #[error("training diverged: non-finite {component} at epoch {epoch}, step {step}")]
    Diverged {
        component: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
