use thiserror::Error;

/// Errors surfaced by tensor math, model construction, file formats, and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("tensors belong to different graphs")]
    GraphMismatch,

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range (classes: {classes}, ignore: {ignore})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        ignore: usize,
    },

    #[error("no valid pixels in batch")]
    EmptyValidSet,

    #[error("empty confusion matrix")]
    EmptyConfusionMatrix,

    #[error("unknown query format `{0}`")]
    UnknownQueryFormat(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGrad(String),

    #[error("loss became non-finite at iteration {iter}")]
    NanLoss { iter: usize },

    #[error("object placement failed after {retries} layout retries")]
    PlacementFailed { retries: usize },

    #[error("{path}: bad magic (expected {expected:?})")]
    BadMagic { path: String, expected: String },

    #[error("{path}: unsupported format version {found} (supported: {supported})")]
    BadVersion {
        path: String,
        found: u32,
        supported: u32,
    },

    #[error("{path}: truncated or corrupt payload: {reason}")]
    CorruptFile { path: String, reason: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
