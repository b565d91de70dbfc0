use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("token id {id} at prompt index {index} is outside the vocabulary of {vocab}")]
    Encoding { index: usize, id: usize, vocab: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("integration failed at step {step}: {reason}")]
    Integration { step: usize, reason: String },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("pose out of renderer limits: {0}")]
    Pose(String),

    #[error("conditioning contract violated: {0}")]
    Contract(String),

    #[error("data validation failed: {0}")]
    Validation(String),

    #[error("pipeline health: accepted {accepted} of {attempts} attempts (< 1%)")]
    PipelineHealth { accepted: usize, attempts: usize },

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },

    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    ///
    /// 3 config, 4 data validation, 5 training abort, 6 IO; everything else
    /// is a generic failure (1). Usage errors (2) are produced by the CLI parser.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 3,
            Error::Validation(_) | Error::PipelineHealth { .. } => 4,
            Error::TrainingAborted { .. } => 5,
            Error::Io { .. } | Error::Image { .. } | Error::Json(_) | Error::Format { .. } => 6,
            _ => 1,
        }
    }
}
