//! Spherical masked token modeling for equirectangular panoramas.
//!
//! Panoramas live on an `R x C` grid of view patches of `p x p` discrete
//! tokens. A small bidirectional transformer with extent-scaled rotary
//! positions learns to fill masked tokens of one patch from neighboring
//! patches, and three decoding regimes (autoregressive, local parallel,
//! spherical two-pass parallel) turn it into a panorama generator.

pub mod cli;
pub mod codec;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod rotary;
pub mod schedule;
pub mod sphere_grid;

pub use error::{Error, Result};
