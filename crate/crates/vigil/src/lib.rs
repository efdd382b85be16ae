//! vigil: a desk-scale pipeline for binary classification of surveillance
//! frames (abandoned luggage vs. background).
//!
//! The pipeline runs end to end on a laptop: synthetic scene generation,
//! leakage-free video-level splitting, offline augmentation, transfer
//! learning with a frozen convolutional backbone and a trainable linear
//! head, confusion-matrix evaluation, and gradient-saliency error analysis.
//! Every stage is deterministic given its seeds.

pub mod analysis;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod rng;
pub mod scenegen;
pub mod train;

pub use error::{Error, Result};
