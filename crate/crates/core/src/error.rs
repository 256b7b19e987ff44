use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("noise level {index} has sigma = 0; epsilon is undefined at the clean endpoint")]
    ZeroNoiseLevel { index: usize },

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("anchor with no positive (row {row}, caption {caption_id})")]
    NoPositive { row: usize, caption_id: u64 },

    #[error("embedding row {row} has norm {norm}, expected unit norm")]
    NotNormalized { row: usize, norm: f64 },

    #[error("generation budget {total} is not divisible by {per_caption} images per caption")]
    BudgetNotDivisible { total: u64, per_caption: u64 },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("unknown report format `{0}`")]
    UnknownFormat(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ZeroNoiseLevel { .. } => "zero_noise_level",
            Error::NonFinite { .. } => "non_finite",
            Error::NoPositive { .. } => "no_positive",
            Error::NotNormalized { .. } => "not_normalized",
            Error::BudgetNotDivisible { .. } => "budget_not_divisible",
            Error::Insufficient(_) => "insufficient_data",
            Error::UnknownFormat(_) => "unknown_format",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
