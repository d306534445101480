use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-finite value in column `{column}` at row {row}")]
    NonFinite { column: String, row: usize },
    #[error("unparseable value `{value}` in column `{column}` at row {row}")]
    Parse { column: String, row: usize, value: String },
    #[error("arm label gap: arm {missing} never appears but arm {max} does")]
    ArmLabelGap { missing: usize, max: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected} covariates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero or negative propensity for arm {arm}")]
    ZeroPropensity { arm: usize },
    #[error("propensities do not sum to one (sum = {0})")]
    PropensitySum(f64),
    #[error("arm {arm} is absent from {context}")]
    ArmAbsent { arm: usize, context: String },
    #[error("all weights are zero")]
    ZeroWeights,
    #[error("not enough rows: {have} available, {need} required")]
    TooFewRows { have: usize, need: usize },
    #[error("no candidate arm has observations and shrinkage is zero")]
    NoCandidateArms,
    #[error("every arm estimate is missing")]
    AllArmsMissing,
    #[error("unsupported model version {found} (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },
    #[error("{path}: {source}")]
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

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
