//! Multi-camera room reconstruction with Gaussian splats.
//!
//! Stages: wand calibration of a fixed camera rig, stereo depth fusion into
//! a colored point cloud, per-timestamp Gaussian-splat optimization with an
//! augmented-view refinement loop, and rendering/evaluation along arbitrary
//! trajectories.

pub mod augment;
pub mod calibration;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod knn;
pub mod manifest;
pub mod pipeline;
pub mod replay;
pub mod scenegen;
pub mod splat;
pub mod stereo;
pub mod train;
pub mod views;

pub use error::{Error, Result};
