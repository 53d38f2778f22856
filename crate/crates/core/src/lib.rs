//! Guided super-resolution of coarse land surface temperature grids.
//!
//! A coarse field is refined by an integer factor with anisotropic diffusion
//! steered by a static high-resolution guide (land cover, elevation, canopy
//! height), interleaved with a block adjustment that keeps the NaN-aware
//! coarsening of the result equal to the input.
//!
//! - [`grid`]: rasters with validity masks, pooling and resampling
//! - [`codec`]: scale/offset int16 packing and the native container
//! - [`guide`]: guide assembly and per-edge conductances
//! - [`solver`]: the diffuse-adjust iteration
//! - [`tiler`]: patch plans and overlap-average stitching
//! - [`pipeline`]: tiled solving of whole scenes
//! - [`metrics`]: validation statistics and station match-ups
//! - [`synth`]: synthetic scenes with known truth

// NaN checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod error;
pub mod grid;
pub mod guide;
pub mod metrics;
pub mod pipeline;
pub mod solver;
pub mod synth;
pub mod tiler;

pub use error::{Error, Result};
pub use grid::{GeoTransform, Grid2D, ScaleParams};
