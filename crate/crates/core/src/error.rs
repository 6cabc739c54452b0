use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = BgError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BgError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid value for `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("input size {height}x{width} is not divisible by 32")]
    Sizing { height: usize, width: usize },

    #[error("{0}")]
    Domain(String),

    #[error("learning-rate schedule: epoch {epoch} is outside 0..{total}")]
    Schedule { epoch: usize, total: usize },

    #[error("failed to load {path}: {message}")]
    Load { path: PathBuf, message: String },

    #[error("malformed archive: {0}")]
    Decode(String),

    #[error("non-finite values after {0}")]
    NonFinite(String),

    #[error("loss became non-finite at step {step}: {report}")]
    NonFiniteLoss { step: usize, report: String },

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl BgError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        BgError::Config { key: key.into(), message: message.into() }
    }

    pub fn shape(message: impl Into<String>) -> Self {
        BgError::Shape(message.into())
    }
}

impl BgError {
    /// Process exit status: 1 for user errors (configuration, paths, inputs),
    /// 2 for violated internal invariants.
    pub fn exit_code(&self) -> i32 {
        match self {
            BgError::Config { .. }
            | BgError::ConfigParse(_)
            | BgError::Sizing { .. }
            | BgError::Schedule { .. }
            | BgError::Load { .. }
            | BgError::Decode(_)
            | BgError::Image { .. }
            | BgError::Io(_) => 1,
            BgError::Shape(_)
            | BgError::Domain(_)
            | BgError::NonFinite(_)
            | BgError::NonFiniteLoss { .. }
            | BgError::Json(_) => 2,
        }
    }
}
