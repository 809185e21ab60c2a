use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("unknown hyperparameter index {index} (kernel has {count})")]
    UnknownHyperparameter { index: usize, count: usize },

    #[error("unsupported Matérn smoothness {0}; expected 1/2, 3/2 or 5/2")]
    UnsupportedNu(String),

    #[error("unknown model variant `{0}`")]
    UnknownVariant(String),

    #[error("covariance factorization failed after jitter escalation to {jitter:e}")]
    Factorization { jitter: f64 },

    #[error("predictive covariance has a negative diagonal entry {0:e}")]
    NegativeVariance(f64),

    #[error("non-finite objective value at the starting point")]
    NonFiniteStart,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric value `{value}` in column `{column}` (line {line})")]
    NonNumeric {
        column: String,
        value: String,
        line: u64,
    },

    #[error("duplicate observation for series `{series}` at time {time}")]
    DuplicateObservation { series: String, time: String },

    #[error("series `{0}` is empty after dropping incomplete rows")]
    EmptySeries(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
