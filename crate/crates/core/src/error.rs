use thiserror::Error;

pub type Result<T> = std::result::Result<T, GbreError>;

/// Errors raised anywhere in the pipeline.
///
/// The variants are grouped so the CLI can map them onto exit codes:
/// configuration problems, bad input data, and numerical failures.
#[derive(Debug, Error)]
pub enum GbreError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidOp { op: &'static str, msg: String },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {count} malformed record(s); first: {first}")]
    Records {
        path: String,
        count: usize,
        first: String,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl GbreError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        GbreError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        GbreError::InvalidOp {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        GbreError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<serde_json::Error> for GbreError {
    fn from(err: serde_json::Error) -> Self {
        GbreError::Serde(err.to_string())
    }
}
