use thiserror::Error;

use crate::arima::ArimaModel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An argument is outside its documented domain.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("ingest error at row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("degenerate scaler: max ({max}) must exceed min ({min})")]
    DegenerateScaler { min: f64, max: f64 },

    #[error("series too short: need at least {required} points, got {actual}")]
    TooShort { required: usize, actual: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// CSS optimisation hit its iteration cap. The best parameters seen are kept.
    #[error("ARIMA fit did not converge after {iterations} iterations")]
    NotConverged {
        iterations: usize,
        best: Box<ArimaModel>,
    },

    #[error("fit error: {0}")]
    Fit(String),

    #[error("non-finite value at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
