use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a zero-length vector (norm {norm:e})")]
    ZeroVector { norm: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("standard deviation must be non-negative, got {0}")]
    NegativeStd(f64),

    #[error("bad layer dims {0:?}: need at least two positive entries")]
    BadDims(Vec<usize>),
    #[error("input has dimension {got}, model expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("activation cache does not belong to this model")]
    StaleCache,
    #[error("gradient shape does not match model")]
    ShapeMismatch,
    #[error("invalid hyperparameter {name} = {value}")]
    BadHyperparameter { name: &'static str, value: f64 },

    #[error("noise needs at least two classes, got {0}")]
    SingleClass(usize),
    #[error("noise rate must lie in [0, 1), got {0}")]
    BadRate(f64),
    #[error("invalid pair map: {0}")]
    BadPairMap(String),

    #[error("fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("class {0} centroid collapsed to the zero vector")]
    DegenerateCentroid(usize),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid synthetic spec: {0}")]
    BadSynthSpec(String),
    #[error("could not place {0} class centers at the requested separation")]
    PlacementFailure(usize),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("inconsistent dimensions: {0}")]
    DimInconsistency(String),
    #[error("class {class} has {count} samples, too few to split")]
    ClassTooSmall { class: usize, count: usize },

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("mask selects an empty group")]
    EmptyGroup,
    #[error("AUC needs both positive and negative samples")]
    OneClassOnly,

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
