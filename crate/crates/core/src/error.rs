use thiserror::Error;

pub type Result<T> = std::result::Result<T, CpcError>;

#[derive(Debug, Error)]
pub enum CpcError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: input of length {len} is too short, minimum length is {min}")]
    InputTooShort {
        op: &'static str,
        len: usize,
        min: usize,
    },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("horizon {k} out of range 1..={max}")]
    HorizonOutOfRange { k: usize, max: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("negative sampling strategy {strategy} is infeasible: {reason}")]
    StrategyInfeasible {
        strategy: &'static str,
        reason: String,
    },

    #[error("class {0} has no training examples")]
    MissingClass(usize),

    #[error("{0} has no oracle for this operation")]
    UnsupportedTask(&'static str),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed dataset dump: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CpcError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        CpcError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CpcError::InvalidArgument(msg.into())
    }
}
