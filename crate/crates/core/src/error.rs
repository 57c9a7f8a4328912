use std::path::PathBuf;

use thiserror::Error;

use crate::SchoolId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate labels: {positives} positives out of {n} rows")]
    DegenerateLabels { positives: usize, n: usize },

    #[error("no common support: {0}")]
    NoOverlap(String),

    #[error(
        "matching failed: treated-side school {school} has no available match \
         ({candidates} pool schools inside the caliper, {unmatched} unmatched in total)"
    )]
    MatchingFailure {
        school: SchoolId,
        candidates: usize,
        unmatched: usize,
    },

    #[error("matrix is not positive definite after ridge (smallest eigenvalue {eigenvalue:e}): {context}")]
    NotPositiveDefinite { context: String, eigenvalue: f64 },

    #[error("rank-deficient design; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("{what} did not converge after {evaluations} evaluations")]
    NonConvergence {
        what: String,
        evaluations: usize,
        trace: Vec<f64>,
    },

    #[error("cannot rescale shrunken estimates: they have zero variance but tau^2 = {tau2}")]
    DegenerateRescale { tau2: f64 },

    #[error("spread is undefined for fewer than two values (got {0})")]
    SpreadUndefined(usize),

    #[error("malformed input in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(String),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Short machine-readable tag used in failure records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Argument(_) => "argument",
            Error::DegenerateLabels { .. } => "degenerate_labels",
            Error::NoOverlap(_) => "no_overlap",
            Error::MatchingFailure { .. } => "matching_failure",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::NonConvergence { .. } => "non_convergence",
            Error::DegenerateRescale { .. } => "degenerate_rescale",
            Error::SpreadUndefined(_) => "spread_undefined",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Toml(_) => "toml",
        }
    }
}
