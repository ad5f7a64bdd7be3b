use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("vector norm below 1e-12 in {0}")]
    ZeroNorm(&'static str),
    #[error("gradient requested for a non-scalar node of shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {0} is not a leaf of this tape")]
    UnknownLeaf(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::NotADistribution(_) => "not_a_distribution",
            Error::ZeroNorm(_) => "zero_norm",
            Error::NotScalar(_) => "not_scalar",
            Error::UnknownLeaf(_) => "unknown_leaf",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
