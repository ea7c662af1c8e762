//! Progressive, attribute-conditioned 8x face hallucination.
//!
//! A 16x16 face and a 12-entry attribute vector go in; the generator emits
//! 32, 64 and 128 pixel reconstructions, each stage adding a learned RGB
//! residual to a bilinear upsampling of the previous stage. Per-stage
//! Wasserstein critics with attribute heads and an LR attribute classifier
//! complete the training system.

pub mod attributes;
pub mod error;
pub mod features;
pub mod generator;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod checkpoint;
pub mod classifier;
pub mod critic;
pub mod data;
pub mod optim;
pub mod resample;
pub mod synthetic;
pub mod trainer;

pub use attributes::{AttributeVector, ATTRIBUTE_NAMES, N_ATTRIBUTES};
pub use error::{Error, Result};
pub use image::Image;
