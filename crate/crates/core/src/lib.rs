//! Point-cloud pre-training through differentiable SDF volume rendering.
//!
//! A point cloud is encoded into per-point features, averaged into a dense
//! voxel grid, refined by a 3x3x3 convolution, and decoded by small MLP
//! fields into signed distance, color and semantic features. Rays cast from
//! posed cameras composite those fields into pixels, and an L1 loss against
//! observed RGB-D frames trains every stage end to end.
//!
//! The crate also ships analytic scenes with a sphere-tracing renderer for
//! ground truth, marching-cubes mesh extraction, and a finite-difference
//! gradient check of the whole pipeline.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod encoder;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod image;
pub mod meshing;
pub mod nn;
pub mod pointcloud;
pub mod renderer;
pub mod rng;
pub mod sparse;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
