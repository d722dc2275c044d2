//! Deterministic stand-ins for the first-stage tokenizer: a ramp-tile
//! codebook, a seamless procedural panorama source, block-pooled image
//! features, and per-view semantic vectors built from those features.

mod codebook;
mod features;
mod htg;
mod image;
mod synth;

pub use codebook::{Codebook, TileLayout};
pub use features::{block_grid, FeatureExtractor, SemanticVector, View};
pub use htg::{read_grid, write_grid, HTG_MAGIC};
pub use image::{read_pnm, write_pnm, PanoImage};
pub use synth::{synth_panorama, SynthParams};
