//! Error type shared across the pipeline.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("infeasible tile plan: {0}")]
    InfeasiblePlan(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("missing annotation file for image stem `{stem}`")]
    MissingAnnotation { stem: String },

    #[error("malformed annotation {file}:{line}: {message}")]
    MalformedAnnotation {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("model format: {0}")]
    ModelFormat(String),

    #[error("image format: {0}")]
    ImageFormat(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Wrap with a context string (e.g. the image id a pipeline stage was
    /// processing when it failed).
    pub fn with_context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
