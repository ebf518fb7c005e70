use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum DipsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("degenerate training set: {0}")]
    DegenerateTraining(String),

    #[error("non-finite loss at checkpoint {checkpoint}")]
    NonFiniteLoss { checkpoint: usize },

    #[error("no dynamics recorded yet")]
    NoDynamics,

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DipsError {
    /// Stable snake_case tag for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::InvalidArgument(_) => "invalid_argument",
            Self::ShapeMismatch { .. } => "shape_mismatch",
            Self::DegenerateTraining(_) => "degenerate_training",
            Self::NonFiniteLoss { .. } => "non_finite_loss",
            Self::NoDynamics => "no_dynamics",
            Self::IndexOutOfRange { .. } => "index_out_of_range",
            Self::Parse { .. } => "parse",
            Self::Io(_) => "io",
            Self::Csv(_) => "csv",
            Self::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, DipsError>;

pub(crate) fn invalid(msg: impl Into<String>) -> DipsError {
    DipsError::InvalidArgument(msg.into())
}
