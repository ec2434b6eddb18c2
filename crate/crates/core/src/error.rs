use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated payload, header declares {expected} bytes but {actual} are present")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("count mismatch: {images_path} holds {images} images but {labels_path} holds {labels} labels")]
    CountMismatch {
        images_path: PathBuf,
        labels_path: PathBuf,
        images: usize,
        labels: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("dataset has no class ids")]
    MissingClassIds,

    #[error("class id {id} at row {row} is outside [0, 9]")]
    InvalidClassId { row: usize, id: u32 },

    #[error("class {class} has {available} examples but {needed} are required")]
    InsufficientClass {
        class: u32,
        available: usize,
        needed: usize,
    },

    #[error("target size {target} is not divisible by {classes} classes")]
    IndivisibleTarget { target: usize, classes: usize },

    #[error("zero row at index {0}")]
    ZeroRow(usize),

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty neuron selection")]
    EmptySelection,

    #[error("labels must be exactly 0 or 1 (row {row} has {value})")]
    NonBinaryLabels { row: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Divergence { iteration: usize, loss: f64 },

    #[error("nonpositive loss {value} at position {index}")]
    NonPositiveLoss { index: usize, value: f64 },

    #[error("rate factor out of range: {0}")]
    RateOutOfRange(f64),

    #[error("missing bound parameter `{0}`")]
    MissingParameter(&'static str),

    #[error("simplex iteration cap {cap} exceeded")]
    IterationCap { cap: usize },

    #[error("LP solution violates a constraint by {violation:e}")]
    LpViolation { violation: f64 },

    #[error("subnetwork loss bound violated at k={k}: loss {loss} exceeds {bound}")]
    BoundViolation { k: usize, loss: f64, bound: f64 },

    #[error("sweep cell (m={m}, N={width}, trial={trial}, t={checkpoint}) failed: {source}")]
    Cell {
        m: usize,
        width: usize,
        trial: usize,
        checkpoint: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::CountMismatch { .. }
            | Error::Format { .. } => 3,
            Error::BoundViolation { .. } | Error::LpViolation { .. } => 2,
            Error::Cell { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
