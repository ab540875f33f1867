use thiserror::Error;

/// Errors raised across ingestion, model construction and fitting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("empty cohort file")]
    EmptyFile,

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("subject `{subject}`: overlapping intervals at row {row}")]
    OverlappingIntervals { subject: String, row: usize },

    #[error("subject `{subject}`: event recorded before a later interval (row {row})")]
    EventNotLast { subject: String, row: usize },

    #[error("subject `{subject}`: t_start must be < t_stop (row {row})")]
    EmptyInterval { subject: String, row: usize },

    #[error("cohort contains no events")]
    NoEvents,

    #[error("invalid model specification: {0}")]
    Spec(String),

    #[error("term `{term}`: {message}")]
    Term { term: String, message: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("penalized Hessian is not positive definite (block `{block}`)")]
    RankDeficient { block: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid simulation spec: {0}")]
    Simulation(String),
}

impl Error {
    /// True for errors caused by malformed inputs rather than numerical breakdown.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::RankDeficient { .. } | Error::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
