//! Differentiable 3D Gaussian splatting reconstruction toolkit.
//!
//! The pipeline lifts per-view depth and attribute predictions into
//! pixel-wise 3D Gaussians, merges them with a differentiable voxelization
//! step, renders RGB / expected-depth / alpha through a software tile
//! rasterizer with a full analytic backward pass, and evaluates the result
//! with the usual image, depth and relative-pose metrics. An optional
//! post-optimization stage refines Gaussian parameters and camera poses
//! against the input views.

pub mod buffers;
pub mod camera;
pub mod error;
pub mod fitter;
pub mod gaussian;
pub mod io;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod sampler;
pub mod sh;
pub mod ssim;
pub mod voxel;

#[cfg(test)]
pub(crate) mod test_util;

pub use buffers::ImageRgb;
pub use camera::{Camera, PoseEncoding};
pub use error::{Error, Result};
pub use gaussian::{AttributeMaps, DepthMap, GaussianGrads, GaussianSet};
pub use loss::{LossReport, LossWeights};
pub use render::{RenderBuffers, RenderOptions};
pub use voxel::VoxelGrid;
