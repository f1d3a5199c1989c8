use thiserror::Error;

/// Errors produced by the estimation pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("insufficient history: need at least {needed} periods, got {got}")]
    InsufficientHistory { needed: usize, got: usize },

    #[error("too few observations: need at least {needed}, got {got}")]
    TooFewObservations { needed: usize, got: usize },

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("degenerate residuals: series {series} has non-positive sample variance")]
    DegenerateResidual { series: usize },

    #[error(
        "post-selection refit infeasible: {selected} selected controls + {factors} factors + 1 >= T = {t}; increase the penalty constant C"
    )]
    RefitInfeasible { selected: usize, factors: usize, t: usize },

    #[error("matrix is not positive semi-definite (smallest eigenvalue {min_eig:e})")]
    NotPsd { min_eig: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty panel: {0}")]
    EmptyPanel(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io { path: path.as_ref().display().to_string(), source }
    }
}
