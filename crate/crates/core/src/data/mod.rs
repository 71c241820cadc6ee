//! Synthetic weather degradations, procedural scenes and dataset manifests.

mod dataset;
mod scenes;
mod synth;

pub use dataset::*;
pub use scenes::*;
pub use synth::*;
