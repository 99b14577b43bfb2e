//! Error type shared by every stage of the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("path list is empty")]
    EmptyPathList,

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("observation has zero signal energy at finite SNR")]
    ZeroSignal,

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("noise level {t} outside [{min}, {max}]")]
    NoiseLevelOutOfRange { t: f64, min: f64, max: f64 },

    #[error("non-finite training loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: usize, diagnostics: String },

    #[error("non-finite PnP state at iteration {iteration}")]
    NonFiniteState { iteration: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("denoiser requires a consistency-model checkpoint")]
    MissingCheckpoint,

    #[error("validation set is empty")]
    EmptyValidationSet,

    #[error("reference channel has zero norm")]
    ZeroTruth,

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("{source} (alpha {alpha}, snr {snr_db} dB, sample {sample})")]
    AtSample {
        alpha: f64,
        snr_db: f64,
        sample: usize,
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable name of the variant, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyPathList => "EmptyPathList",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::Parse { .. } => "ParseError",
            Error::MissingColumn(_) => "MissingColumn",
            Error::InvalidRange(_) => "InvalidRange",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::ZeroSignal => "ZeroSignal",
            Error::NonFinite { .. } => "NonFiniteEncountered",
            Error::NoiseLevelOutOfRange { .. } => "NoiseLevelOutOfRange",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::NonFiniteState { .. } => "NonFiniteState",
            Error::CorruptCheckpoint(_) => "CorruptCheckpoint",
            Error::VersionMismatch(_) => "VersionMismatch",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::MissingCheckpoint => "MissingCheckpoint",
            Error::EmptyValidationSet => "EmptyValidationSet",
            Error::ZeroTruth => "ZeroTruth",
            Error::CorruptDataset(_) => "CorruptDataset",
            Error::AtSample { source, .. } => source.kind(),
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
        }
    }
}

pub(crate) fn check_dims(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
