use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed data, such as an off-grid rubric score.
    #[error("validation error: {0}")]
    Validation(String),

    /// An operation was called outside its domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value in parameter block `{block}` at index {index}")]
    NonFinite { block: &'static str, index: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("vocabulary size mismatch: checkpoint has {checkpoint}, data has {data}")]
    VocabMismatch { checkpoint: usize, data: usize },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Argument(_)
                | Error::VocabMismatch { .. }
                | Error::Checkpoint(_)
                | Error::Parse { .. }
                | Error::Json(_)
        )
    }
}
