use crate::tensor::TensorError;

/// Coarse error category; the CLI maps these to exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
    #[error("schema: {0}")]
    Schema(String),
    #[error("structure: {0}")]
    Structural(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parameter(_) | Error::Config(_) => ErrorKind::Config,
            Error::Numeric(_) => ErrorKind::Numeric,
            Error::Tensor(TensorError::NonFinite { .. }) => ErrorKind::Numeric,
            Error::Tensor(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
