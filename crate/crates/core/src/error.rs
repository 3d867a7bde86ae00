use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("output index {index} out of range for model with {outputs} outputs")]
    OutputIndexOutOfRange { index: usize, outputs: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset task does not match model task")]
    TaskMismatch,

    #[error("degenerate score: {0}")]
    DegenerateScore(String),

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("exact Shapley limited to {limit} inputs, got {actual}; use the sampled variant")]
    ShapleySizeLimit { limit: usize, actual: usize },

    #[error("parse error in {section}{}: {message}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Parse {
        section: String,
        offset: Option<u64>,
        message: String,
    },

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("roi error: {0}")]
    Roi(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
