//! Dense-detection panoptic segmentation: target assignment, query selection,
//! parameter-free mask construction, losses, metrics and synthetic scenes.

pub mod assignment;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod losses;
pub mod maskcons;
pub mod metrics;
pub mod pipeline;
pub mod selection;
pub mod synth;

pub use error::{Error, Result};
