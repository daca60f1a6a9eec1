//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-binary value {value} at row {row}, column `{column}`")]
    NonBinaryValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("missing value at row {row}, column `{column}` (no fill rule configured)")]
    MissingValue { row: usize, column: String },
    #[error("empty {0} arm")]
    EmptyArm(&'static str),
    #[error("stratum (t={t}, y={y}) has {size} rows, fewer than its test target {target}")]
    StratumTooSmall {
        t: u8,
        y: u8,
        size: usize,
        target: usize,
    },
    #[error("enrollment time is required for time-based folds but is absent")]
    MissingTime,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("subgroup has an empty treatment or control arm")]
    EmptySubgroupArm,
    #[error("variance block too small: {0}")]
    BlockTooSmall(String),
    #[error("every bin is missing a plug-in estimate")]
    AllBinsMissing,
    #[error("baseline calibration score is zero; calibration R^2 is undefined")]
    DegenerateBaseline,
    #[error("no estimator ranks in the top {0} under every perturbation")]
    EmptyScreen(usize),
    #[error("planted effects push a {arm} risk to {risk}, outside [0, 1]")]
    InvalidRisk { arm: &'static str, risk: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing prediction for row {0}")]
    MissingPrediction(usize),
    #[error("stage `{0}` has not run; its artifact is missing")]
    MissingStage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 = config, 3 = data validation, 4 = internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::Toml(_) | Error::MissingStage(_) => 2,
            Error::MissingColumn(_)
            | Error::NonBinaryValue { .. }
            | Error::MissingValue { .. }
            | Error::EmptyArm(_)
            | Error::StratumTooSmall { .. }
            | Error::MissingTime
            | Error::InvalidRisk { .. }
            | Error::Csv(_) => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
