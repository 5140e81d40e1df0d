use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MsfError {
    #[error("disparity {value} at flat index {index} is not positive")]
    NonPositiveDisparity { index: usize, value: f64 },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("image size {height}x{width} is not divisible by 8; resize the input")]
    NotDivisible { height: usize, width: usize },

    #[error("codec error in {path}: {reason}")]
    Codec { path: PathBuf, reason: String },

    #[error("degenerate scene configuration: {0}")]
    DegenerateScene(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFiniteLoss { step: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MsfError {
    /// Short stable identifier for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::NonPositiveDisparity { .. } => "domain",
            Self::InvalidCamera(_) => "camera",
            Self::Shape(_) => "shape",
            Self::NotDivisible { .. } => "size",
            Self::Codec { .. } => "codec",
            Self::DegenerateScene(_) => "scene",
            Self::Config(_) => "config",
            Self::Dataset(_) => "dataset",
            Self::Checkpoint(_) => "checkpoint",
            Self::NonFiniteLoss { .. } => "nan",
            Self::Io(_) => "io",
            Self::Image(_) => "image",
            Self::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, MsfError>;
