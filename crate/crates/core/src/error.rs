use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidOperand { op: &'static str, msg: String },

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("loss must be scalar-shaped, got {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("node {0} does not belong to this graph")]
    ForeignNode(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("extent {extent} along axis {axis} is not divisible by {divisor}")]
    NotDivisible {
        axis: &'static str,
        extent: usize,
        divisor: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty mask: no masked patches to reconstruct")]
    EmptyMask,

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: payload is {actual} bytes, expected {expected}")]
    PayloadLength {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("training diverged: non-finite loss at step {0}")]
    Diverged(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn operand(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidOperand {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
