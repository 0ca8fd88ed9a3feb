//! Two-stage point cloud completion.
//!
//! A conditional diffusion model produces a coarse complete cloud from a
//! partial scan; a context-aware refiner then merges the scan back in
//! (mixed sampling with surface freezing) and moves the remaining points
//! using patch similarity that is invariant to rigid motion.

pub mod config;
pub mod cref;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
pub use geometry::{Origin, Patch, PointCloud, RigidFrame, Vec3, Mat3};
