//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SsipError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SsipError {
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("incomplete audiogram{}: missing {missing} Hz", record.as_ref().map(|r| format!(" for record {r}")).unwrap_or_default())]
    IncompleteAudiogram { record: Option<String>, missing: u32 },

    #[error("invalid calibration curve: {0}")]
    InvalidCurve(String),

    #[error("score is the unknown sentinel and cannot be calibrated")]
    UnknownScore,

    #[error("duplicate sample id {0}")]
    DuplicateId(String),

    #[error("listener {0} is not assigned to any split role")]
    UnassignedListener(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty support set")]
    EmptySupport,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("backbone error: {0}")]
    Backbone(String),

    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss")]
    Divergence { epoch: usize, step: usize },

    #[error("listener leakage: {0}")]
    Leakage(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl SsipError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SsipError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            SsipError::DegenerateSignal(_) => "DegenerateSignal",
            SsipError::Io { .. } => "IoError",
            SsipError::Format(_) => "FormatError",
            SsipError::IncompleteAudiogram { .. } => "IncompleteAudiogram",
            SsipError::InvalidCurve(_) => "InvalidCurve",
            SsipError::UnknownScore => "UnknownScore",
            SsipError::DuplicateId(_) => "DuplicateId",
            SsipError::UnassignedListener(_) => "UnassignedListener",
            SsipError::InsufficientSamples(_) => "InsufficientSamples",
            SsipError::Shape(_) => "ShapeError",
            SsipError::EmptySupport => "EmptySupport",
            SsipError::EmptyInput(_) => "EmptyInput",
            SsipError::Range(_) => "RangeError",
            SsipError::Backbone(_) => "BackboneError",
            SsipError::Divergence { .. } => "DivergenceError",
            SsipError::Leakage(_) => "LeakageError",
            SsipError::Config(_) => "ConfigError",
        }
    }
}
