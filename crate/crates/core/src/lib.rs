pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod prompt;
pub mod prompt_block;
pub mod residual;
pub mod train;

pub use error::{Error, Result};
pub use backbone::Model;
pub use config::{Config, Preset};
pub use data::{DegradationKind, DegradationSpec, SamplePair};
pub use embedder::{Caption, CaptionMetadata, Embedder, Embedding};
pub use eval::MetricReport;
pub use image::Image;
pub use pipeline::{ImageRestorer, Restoration, Restorer};
