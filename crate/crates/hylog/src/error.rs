use thiserror::Error;

/// Unified error type for tensor operations, model construction and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Geometry { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("config error: {0}")]
    Config(String),
    #[error("activation normalization used before initialization in inference mode")]
    ActNormUninitialized,
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("missing target for enabled stream `{0}`")]
    MissingTarget(&'static str),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: u64 },
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
}

impl Error {
    pub(crate) fn geometry(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Geometry {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
