use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Input violated a shape or value precondition.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// Tensor shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An operation was called out of order (e.g. backward without forward).
    #[error("state error: {0}")]
    StateError(String),

    /// A non-finite loss or gradient appeared during training.
    #[error("training diverged at iteration {iteration}: {detail}")]
    TrainingDiverged { iteration: u64, detail: String },

    /// Malformed file contents; `offset` is the byte position of the defect.
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    /// A pipeline stage failed; wraps the cause with the stage name.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn rejected(msg: impl Into<String>) -> Self {
        Error::RejectedInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::StateError(msg.into())
    }

    pub fn parse(offset: u64, detail: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            detail: detail.into(),
        }
    }

    /// Tags an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
