use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor shape {shape:?} holds {expected} values but {actual} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("pose has {actual} joints, skeleton expects {expected}")]
    JointCount { expected: usize, actual: usize },

    #[error("joint {joint} is behind the camera (depth {depth})")]
    BehindCamera { joint: usize, depth: f64 },

    #[error("heatmap for joint {0} has no positive mass")]
    EmptyHeatmap(usize),

    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged at step {step} (lr {lr:e}, batch hash {batch_hash:016x}): loss is {loss}")]
    Diverged {
        step: u64,
        lr: f64,
        batch_hash: u64,
        loss: f64,
    },

    #[error("{what}: unsupported format version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("{what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            error: source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
