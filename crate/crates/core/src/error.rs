use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header {path}: {msg}")]
    Header { path: PathBuf, msg: String },
    #[error("payload size mismatch: header expects {expected} scalars, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("single-cell kernel: sigma {sigma} with t {t} gives radius 0")]
    SingleCellKernel { sigma: f64, t: f64 },
    #[error("kernel radius {radius} does not fit volume dims {dims:?}")]
    KernelTooLarge { radius: usize, dims: [usize; 3] },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("covariance factorization failed: {0}")]
    Factorization(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
