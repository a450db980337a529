//! Desk-scale multimodal language-model pipeline built around four kinds of
//! mixing: interpolated model weights, channel- and sequence-concatenated
//! visual embeddings, jointly sampled tuning tasks, and multi-scale
//! high-resolution sub-image tiling.
//!
//! Everything runs on a small deterministic f64 autodiff core so that token
//! arithmetic, tiling geometry, weight interpolation, and gradients are all
//! exactly testable on one CPU.

pub mod error;
pub mod eval;
pub mod image;
pub mod numerics;
pub mod rng;

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod lm;
pub mod mixer;
pub mod model;
pub mod encoders;
pub mod params;
pub mod tiler;
pub mod trainer;

pub use error::{Error, Result};
