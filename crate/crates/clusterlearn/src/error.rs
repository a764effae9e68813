//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular design: column `{column}` is collinear with the preceding columns")]
    SingularDesign { column: String },

    #[error("degenerate instrument: first-stage coefficient {value:.3e} below tolerance")]
    DegenerateInstrument { value: f64 },

    #[error("cluster {cluster} has {size} observations, fewer than the {min} required for a within-cluster fit")]
    TooSmallCluster {
        cluster: usize,
        size: usize,
        min: usize,
    },

    #[error("degenerate statistic: {0}")]
    DegenerateStatistic(String),

    #[error(
        "orbit enumeration too large for k = {k}; use Monte Carlo orbit sampling (--orbit-draws)"
    )]
    EnumerationTooLarge { k: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("calibration failure: {0}")]
    CalibrationFailure(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema mismatch: {0}")]
    Schema(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 input, 3 numerical, 4 calibration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericalFailure(_)
            | Error::SingularDesign { .. }
            | Error::DegenerateInstrument { .. }
            | Error::DegenerateStatistic(_) => 3,
            Error::CalibrationFailure(_) | Error::TooSmallCluster { .. } => 4,
            _ => 2,
        }
    }
}
