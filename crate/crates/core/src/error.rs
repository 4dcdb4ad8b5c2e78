use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("sequence length {len} is not divisible by the temporal downsampling factor {factor}; pad or crop the clip")]
    IndivisibleLength { len: usize, factor: usize },
    #[error("motion file has bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("motion file truncated: header promises {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("motion file shape mismatch: {0}")]
    HeaderMismatch(String),
    #[error("unknown token id {0}")]
    UnknownToken(u32),
    #[error("expert bias state is frozen; selection counting is disabled at inference")]
    BiasFrozen,
    #[error("{what} needs {needed} samples, only {have} available")]
    InsufficientSamples {
        what: &'static str,
        needed: usize,
        have: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact {}: run the producing stage first", .0.display())]
    MissingArtifact(std::path::PathBuf),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
