use thiserror::Error;

/// Every failure the laboratory can report.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what}: {len} is not divisible by {by}")]
    Divisibility {
        what: &'static str,
        len: usize,
        by: usize,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("row {row} has no unmasked entries")]
    DegenerateRow { row: usize },

    #[error("group desync at rank {rank} in {collective}: {detail}")]
    Desync {
        rank: usize,
        collective: String,
        detail: String,
    },

    #[error("cannot reconstruct from shards: {0}")]
    Reconstruction(String),

    #[error("kernel error: {0}")]
    Kernel(String),

    #[error("missing or mismatched saved state: {0}")]
    State(String),

    #[error("invalid config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("io error: {0}")]
    Io(String),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
