use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: row {row}: {message}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: file contains no data rows")]
    EmptyFile { path: PathBuf },

    #[error("{path}: duplicate id {id}")]
    DuplicateId { path: PathBuf, id: String },

    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),

    #[error("ill-conditioned kernel: factorization failed with jitter {jitter:e}")]
    IllConditioned { jitter: f64 },

    #[error("fit diverged for series {id}: {diagnostics}")]
    FitDiverged { id: String, diagnostics: String },

    #[error("degenerate range: series {0} has fewer than two distinct ages")]
    DegenerateRange(String),

    #[error("missing input for variant {variant}: {what}")]
    MissingInput { variant: String, what: String },

    #[error("regime mismatch for variant {variant}: got {got}")]
    RegimeMismatch { variant: String, got: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("too few training points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("invalid classifier configuration: {0}")]
    InvalidClassifier(String),

    #[error("training data contains a single class")]
    SingleClass,

    #[error("SMO did not converge after {iterations} iterations (worst KKT violation {violation:e})")]
    NotConverged { iterations: usize, violation: f64 },

    #[error("length mismatch: {0} predictions vs {1} truths")]
    LengthMismatch(usize, usize),

    #[error("too few patients for {folds}-fold split: {got}")]
    TooFewPatients { folds: usize, got: usize },

    #[error("invalid cohort config: {0}")]
    InvalidConfig(String),

    #[error("unknown {kind}: {value}")]
    Unknown { kind: &'static str, value: String },

    #[error("missing label for patient {0}")]
    MissingLabel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
