use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Validation problems (bad input, inconsistent schema, impossible
/// configuration) are kept apart from numerical failures so the CLI can map
/// them to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: timestamps must be strictly increasing ({detail})")]
    NonMonotoneTimestamps { row: usize, detail: String },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: u64,
        message: String,
    },

    #[error("unknown category label(s) for `{column}` at rows {rows:?}")]
    UnknownCategory { column: String, rows: Vec<usize> },

    #[error("demeaning did not converge after {iterations} iterations (last delta {last_delta:e})")]
    NotConverged { iterations: usize, last_delta: f64 },

    #[error("all regressors are collinear: {0:?}")]
    AllCollinear(Vec<String>),

    #[error("cluster-robust covariance needs at least two clusters, got {0}")]
    TooFewClusters(usize),

    #[error("dense dummy-variable fit is limited to {limit} rows, got {rows}")]
    TooLarge { rows: usize, limit: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing days for cell ({lat}, {lon}): {days:?}")]
    MissingDays { lat: f64, lon: f64, days: Vec<u32> },

    #[error("grid geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the estimation machinery rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotConverged { .. }
                | Error::AllCollinear(_)
                | Error::TooFewClusters(_)
                | Error::Numerical(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
