use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("unknown group element {0}")]
    UnknownElement(usize),
    #[error("group axioms violated: {0}")]
    GroupAxiom(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("no gradient recorded for parameter {0}")]
    MissingGradient(usize),
    #[error("non-finite value produced by op `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("problem size {size} exceeds the explicit-matrix cap {cap}; use the iterative least-squares solver instead")]
    SizeCap { size: usize, cap: usize },
    #[error("cannot parse spec `{spec}`: {reason}. Accepted grammar: {grammar}")]
    Spec {
        spec: String,
        reason: String,
        grammar: &'static str,
    },
    #[error("{0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
