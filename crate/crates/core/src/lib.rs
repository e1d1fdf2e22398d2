//! Instance segmentation trained from image-level labels only.
//!
//! The pipeline has two branches. A class-activation-map classifier with a
//! peak stimulation layer locates objects; each peak is turned into a pseudo
//! instance mask by sampling an object proposal that covers it, weighted by
//! objectness. A detect-then-segment model is then trained on those pseudo
//! masks, and its predictions can optionally be snapped to the proposal of
//! highest Jaccard similarity.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod plots;
pub mod pseudo;
pub mod rng;
pub mod scenes;
pub mod segmenter;

pub use error::{Error, Result};
