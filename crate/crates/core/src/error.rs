use thiserror::Error;

/// Library-wide error type. Dimension mismatches inside the numeric kernel are
/// treated as programming errors and panic instead.
#[derive(Debug, Error)]
pub enum Error {
    #[error("csv parse error at line {line}: {reason}")]
    CsvParse { line: usize, reason: String },

    #[error("infeasible schedule: {0}")]
    InfeasibleSchedule(String),

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("loss was non-finite while perturbing coordinate {coordinate}")]
    NonFiniteLoss { coordinate: usize },

    #[error("missing server-side input for {algorithm}: {what}")]
    MissingSignal {
        algorithm: &'static str,
        what: &'static str,
    },

    #[error("history unavailable: {0}")]
    UnavailableHistory(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
