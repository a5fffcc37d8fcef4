use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible. `detail` names the offending axes.
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{layer}: uninitialized statistics (eval mode requested before any running statistics were recorded)")]
    UninitializedStatistics { layer: String },

    #[error("label {value} at pixel {index} is outside [0, {classes})")]
    LabelOutOfRange {
        index: usize,
        value: u8,
        classes: usize,
    },

    #[error("cross-entropy: every pixel carries the ignore label")]
    NoLabeledPixels,

    #[error("{0}: output is not a scalar")]
    NotScalar(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("miou: no class is present in either prediction or truth")]
    NoValidClass,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("recognizer pretraining failed: {0}")]
    PretrainFailed(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("output directory {0} exists and is not empty (pass --force to overwrite)")]
    NonEmptyOutput(PathBuf),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated while reading {0}")]
    Truncated(&'static str),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("tensor name is not valid utf-8")]
    BadName,
    #[error("metadata block is malformed: {0}")]
    BadMetadata(String),
    #[error("tensor {name}: shape mismatch, model expects {expected:?}, checkpoint has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0} is missing from the checkpoint")]
    Missing(String),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
}
