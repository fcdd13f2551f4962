//! Dynamic Gaussian-splatting reconstruction of RGBD sequences with unknown
//! camera poses.
//!
//! The pipeline processes frames one at a time: a constant-velocity pose
//! prediction is refined jointly with a per-Gaussian temporal deformation
//! model, newly visible regions are filled with pixel-aligned Gaussians, and
//! the deformation model is replayed on a window of earlier frames.

pub mod buffer;
pub mod deform;
pub mod error;
pub mod eval;
pub mod frame;
pub mod io;
pub mod loss;
pub mod optim;
pub mod param;
pub mod pose;
pub mod raster;
pub mod scene;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
