use thiserror::Error;

use crate::elicitation::PreferenceError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("non-binary label {value:?} at row {row}")]
    NonBinaryLabel { row: usize, value: String },

    #[error("unparseable cell {value:?} at row {row}, column {column:?}")]
    UnparseableCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("column {0:?} is constant and cannot be standardized")]
    ConstantColumn(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("degenerate ranking: zero variance")]
    DegenerateRanking,

    #[error("surrogate quality gate failed: held-out R² {r2:.4} < required {required:.4}")]
    SurrogateGate { r2: f64, required: f64 },

    #[error("could only initialize {achieved} of {requested} heads inside the Rashomon bound")]
    HeadInitialization { achieved: usize, requested: usize },

    #[error("all heads became invalid during optimization")]
    AllHeadsInvalid { best_snapshot: Option<Vec<f64>> },

    #[error("subgroup {group} too small: {rows} rows (minimum {minimum})")]
    SubgroupTooSmall {
        group: u8,
        rows: usize,
        minimum: usize,
    },

    #[error(transparent)]
    Preference(#[from] PreferenceError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input rather than by a failure inside
    /// the numerical machinery.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Diverged { .. } | Error::AllHeadsInvalid { .. } | Error::Io(_)
        )
    }
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
