use std::path::PathBuf;

use crate::tensor_store::CompatibilityReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("truncated header: length field says {declared} bytes but only {available} follow")]
    TruncatedHeader { declared: u64, available: u64 },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("tensor {name:?}: unknown dtype tag {tag:?}")]
    UnknownDtype { name: String, tag: String },

    #[error("tensor {name:?}: {reason}")]
    BadLayout { name: String, reason: String },

    #[error("tensor {name:?}: non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("incompatible tensor maps: {0}")]
    Incompatible(CompatibilityReport),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("key {key:?}: block depth {depth} out of range for {num_blocks} blocks")]
    DepthOutOfRange {
        key: String,
        depth: String,
        num_blocks: usize,
    },

    #[error("key {key:?} matches the block pattern at more than one position")]
    AmbiguousDepth { key: String },

    #[error("key {0:?} has no entry in the depth map")]
    MissingDepth(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate merge: merged vector has zero norm")]
    DegenerateMerge,

    #[error("evaluator failed for {context}: {source}")]
    EvaluatorFailed {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("evaluator command exited with {status}\nstdout:\n{stdout}\nstderr:\n{stderr}")]
    EvaluatorExit {
        status: String,
        stdout: String,
        stderr: String,
    },

    #[error("evaluator output is not a single JSON object ({reason})\nstdout:\n{stdout}")]
    EvaluatorMalformed { reason: String, stdout: String },

    #[error("evaluator output has no numeric \"metric\" field\nstdout:\n{stdout}")]
    EvaluatorMissingMetric { stdout: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
