use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward: root must be scalar-valued, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("{what}: expected dimension {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered at t = {t}")]
    NonFinite { t: usize },

    #[error("{what} diverged (loss is not finite) at step {step}")]
    Diverged { what: &'static str, step: usize },

    #[error("degenerate covariance: requested rank {requested}, achieved rank {achieved}")]
    RankDeficient { requested: usize, achieved: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
