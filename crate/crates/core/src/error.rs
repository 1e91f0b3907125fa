use thiserror::Error;

/// Errors raised by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("insufficient window: {got} points, need at least {need}")]
    InsufficientWindow { got: usize, need: usize },
    #[error("degenerate fringe fit (condition estimate {0:e})")]
    DegenerateFit(f64),
    #[error("non-finite value encountered during {0}")]
    NonFinite(String),
    #[error("numerical abort: {0}")]
    NumericalAbort(String),
    #[error("internal consistency check failed: {0}")]
    Consistency(String),
    #[error("data format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
