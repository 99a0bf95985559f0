use thiserror::Error;

/// Errors raised by the estimation library and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("matrix is not positive semi-definite: {0}")]
    NotPsd(String),
    #[error("singular matrix in {0}")]
    Singular(&'static str),
    #[error("matrix square root failed after PSD repair")]
    Cholesky,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("jacobian not available for the {0} map")]
    MissingJacobian(&'static str),
    #[error("{0} requires a diagonal measurement covariance")]
    NonDiagonalR(&'static str),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
