//! Scribble-supervised pre-training and cross-domain transfer.
//!
//! The crate covers the whole experiment path: synthetic source/target
//! datasets, scribble synthesis, paired augmentation, the masked 2D
//! cross-entropy, a small residual network with segmentation and
//! classification heads, backbone transfer, the two training loops, and
//! Table-style aggregation of multi-seed results.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
