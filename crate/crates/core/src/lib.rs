//! Primitive-based semantic scene layouts.
//!
//! Scenes are sets of oriented cuboids and ellipsoids plus extruded ground
//! polygons. The crate covers the Cholesky pose code, ground rasterization,
//! voxelization, set-matching losses, reconstruction and generation
//! metrics, and a DDPM/RePaint sampler over latent grids.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod cli;
pub mod detection;
pub mod diffusion;
pub mod error;
pub mod generative;
pub mod geometry;
pub mod linalg;
pub mod matching;
pub mod raster;
pub mod scene;
pub mod voxel;

pub use error::{Error, Result};
