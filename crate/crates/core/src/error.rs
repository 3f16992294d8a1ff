use std::fmt;

/// A list of extents, printed as `[a, b, c]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dims(pub Vec<usize>);

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl From<&[usize]> for Dims {
    fn from(s: &[usize]) -> Self {
        Dims(s.to_vec())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch { op: &'static str, left: Dims, right: Dims },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("{what} is numerically singular (condition estimate {condition:.3e})")]
    Singular { what: String, condition: f64 },

    #[error("{0} used before data-dependent initialization")]
    NotInitialized(String),

    #[error("bound undefined: norm {norm} outside the validity region for k = {k}")]
    OutsideValidity { norm: f64, k: usize },

    #[error("{context}: malformed input at byte offset {offset}: {msg}")]
    Format { context: String, offset: u64, msg: String },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged and {retries} retries were exhausted")]
    RetriesExhausted { retries: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.into(),
            right: right.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
