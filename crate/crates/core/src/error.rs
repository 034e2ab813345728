use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image space {width}x{height}: both sides must be positive")]
    InvalidSpace { width: u32, height: u32 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no images found under {0}")]
    NoImages(PathBuf),

    #[error("annotation error at {location}: {message}")]
    Annotation { location: String, message: String },

    #[error("missing annotations for {} image(s): {}", .0.len(), .0.join(", "))]
    MissingAnnotations(Vec<String>),

    #[error("image {id}: expected {expected} landmarks, found {found}")]
    LandmarkCount {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("split error: {0}")]
    Split(String),

    #[error("unsupported model: {0}")]
    Capability(String),

    #[error("pretrained weights unavailable: {0}")]
    PretrainedUnavailable(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("spacing error: {0}")]
    Spacing(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error(
        "non-finite loss at epoch {epoch} (lr {lr:e}), last batch: [{}]",
        .batch_ids.join(", ")
    )]
    NonFiniteLoss {
        epoch: usize,
        lr: f64,
        batch_ids: Vec<String>,
    },

    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("chain stage {stage} ({dataset}) failed: {source}")]
    ChainStage {
        stage: usize,
        dataset: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
