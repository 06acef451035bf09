use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest row {row}, column `{column}`: {message}")]
    ManifestRow {
        row: u64,
        column: String,
        message: String,
    },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("image `{path}` does not resolve under {root}")]
    MissingImage { path: PathBuf, root: PathBuf },

    #[error("fold assignment: {0}")]
    Folds(String),

    #[error("class {0} has no samples in the training slice, its weight is undefined")]
    EmptyClass(String),

    #[error("image: {0}")]
    Image(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("fusion config: {0}")]
    Fusion(String),

    #[error("unknown backbone `{0}` (known: resnet50, resnet101, googlenet, vgg13bn, vgg19bn, mobilenet, tiny)")]
    UnknownBackbone(String),

    #[error("pretrained weights for {name} unavailable at {path}: {hint}")]
    WeightsUnavailable {
        name: String,
        path: PathBuf,
        hint: String,
    },

    #[error("tensor file: {0}")]
    Tensors(String),

    #[error("training config: {0}")]
    TrainConfig(String),

    #[error("non-finite loss in phase {phase}, epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        phase: u8,
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("statistics: {0}")]
    Stats(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Codec(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
