use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),

    #[error("image must have 3 channels, got {0}")]
    ChannelCount(usize),

    #[error("image size {h}x{w} is not divisible by {multiple}")]
    NotDivisible { h: usize, w: usize, multiple: usize },

    #[error("image {h}x{w} is smaller than the required {min}x{min}")]
    ImageTooSmall { h: usize, w: usize, min: usize },

    #[error("empty caption")]
    EmptyCaption,

    #[error("missing caption metadata and no external captioner configured")]
    MissingMetadata,

    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("prompt/iteration mismatch: {0}")]
    ContextMismatch(String),

    #[error("unknown decoder level {0}")]
    UnknownLevel(usize),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid degradation spec: {0}")]
    InvalidSpec(String),

    #[error("no images found in {0}")]
    EmptyDirectory(PathBuf),

    #[error("cannot read image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("manifest {path}:{line}: {reason}")]
    Manifest { path: PathBuf, line: usize, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss {loss}; state dumped to {dump:?}")]
    Diverged { step: usize, loss: f64, dump: Option<PathBuf> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
