use thiserror::Error;

use crate::optimize::Trace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("window [{start}, {end}) with context {context} does not fit a series of length {len}")]
    OutOfBounds {
        start: usize,
        end: usize,
        context: usize,
        len: usize,
    },

    #[error("detector requires a non-empty context window")]
    EmptyContext,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training windows have zero variance, no principal basis exists")]
    DegenerateBasis,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss {
        iteration: usize,
        trace: Box<Trace>,
    },

    #[error("sample set is empty")]
    EmptySampleSet,

    #[error("sequence is empty")]
    EmptySequence,

    #[error("ensemble is empty")]
    EmptyEnsemble,

    #[error("no ground-truth dimensions available")]
    NoGroundTruth,

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("non-finite value at row {row}, column {column}")]
    NonFiniteValue { row: usize, column: usize },

    #[error("series of length {0} is too short to split (need at least 10)")]
    TooShort(usize),

    #[error("synthetic spec infeasible: {0}")]
    SpecInfeasible(String),

    #[error("series has no ground-truth labels")]
    MissingLabels,

    #[error("no anomalies to evaluate")]
    NoAnomalies,

    #[error("{requested} dimensions requested, at most {max} fit on one page")]
    TooManyDims { requested: usize, max: usize },

    #[error("external detector failed: {0}")]
    External(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::OutOfBounds { .. } => "OutOfBounds",
            Error::EmptyContext => "EmptyContext",
            Error::InsufficientData(_) => "InsufficientData",
            Error::DegenerateBasis => "DegenerateBasis",
            Error::InvalidParameter { .. } => "InvalidParameter",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::EmptySampleSet => "EmptySampleSet",
            Error::EmptySequence => "EmptySequence",
            Error::EmptyEnsemble => "EmptyEnsemble",
            Error::NoGroundTruth => "NoGroundTruth",
            Error::Parse { .. } => "ParseError",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::TooShort(_) => "TooShort",
            Error::SpecInfeasible(_) => "SpecInfeasible",
            Error::MissingLabels => "MissingLabels",
            Error::NoAnomalies => "NoAnomalies",
            Error::TooManyDims { .. } => "TooManyDims",
            Error::External(_) => "External",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }

    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn shape(expected: impl std::fmt::Display, got: impl std::fmt::Display) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
