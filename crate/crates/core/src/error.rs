use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not symmetric positive definite (pivot {pivot:e} at row {row})")]
    NotSpd { row: usize, pivot: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("power iteration did not converge after {0} steps")]
    NoConvergence(usize),

    #[error("gradient vanished while estimating the adversarial direction")]
    DegenerateDirection,

    #[error("invalid network specification: {0}")]
    InvalidSpec(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("bad IDX magic number {found:#x} (expected {expected:#x})")]
    BadMagic { expected: u32, found: u32 },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("truncated IDX file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },

    #[error("class {class} has {available} samples, {required} required")]
    InsufficientClassSamples {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
