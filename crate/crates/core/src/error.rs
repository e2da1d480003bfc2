use thiserror::Error;

use crate::heads::HeadParams;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate norm: {0}")]
    DegenerateNorm(String),

    #[error("invalid label index {index} (config has {count} labels)")]
    InvalidLabel { index: usize, count: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty objective: {0}")]
    EmptyObjective(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing label(s) in evaluation set: {0}")]
    MissingLabel(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Raised by the trainer; carries the parameters from the last finite step.
    #[error("training diverged at step {step}: {detail}")]
    Divergence {
        step: usize,
        detail: String,
        last_good: Option<Box<HeadParams>>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numbers themselves rather than by the inputs or flags.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::NonFinite(_)
                | Error::DegenerateNorm(_)
                | Error::DegenerateGeometry(_)
        )
    }
}
