//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {stage} at step {step}: {detail}")]
    NonFinite {
        stage: String,
        step: usize,
        detail: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("diffusion backend error: {0}")]
    Backend(String),

    #[error("diffusion backend unreachable after {attempts} attempts: {detail}")]
    BackendUnreachable { attempts: u32, detail: String },

    #[error("pipeline fault in stage `{stage}`: {detail}")]
    Pipeline { stage: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for faults that should abort a pipeline stage (exit code 2)
    /// rather than usage errors (exit code 1).
    pub fn is_pipeline_fault(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Pipeline { .. }
                | Error::Backend(_)
                | Error::BackendUnreachable { .. }
                | Error::Io(_)
        )
    }
}
