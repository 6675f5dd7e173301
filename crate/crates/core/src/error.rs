use thiserror::Error;

use crate::arima::ArimaFit;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is singular beyond jitter tolerance: {0}")]
    Singular(&'static str),

    #[error("matrix is not positive semi-definite: {0}")]
    NotPsd(&'static str),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("switch space too large: {configs} configurations exceed the limit of {limit}")]
    TooManyConfigs { configs: u128, limit: usize },

    #[error("conflicting channel claims: {0}")]
    Conflict(String),

    #[error("optimizer did not converge after {iterations} iterations")]
    NotConverged { iterations: usize, best: Box<ArimaFit> },

    #[error("all candidate fits failed: {0}")]
    AllFitsFailed(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("all switch weights underflowed at step {0}")]
    WeightUnderflow(usize),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: u64, msg: String },

    #[error("unsupported bundle format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupted model bundle: {0}")]
    Corrupted(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
