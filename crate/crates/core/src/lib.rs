//! Conditional point-cloud diffusion: geometry, conditioning, the denoiser,
//! degradations, metrics and the run harness.

pub mod conditioning;
pub mod degrade;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;

pub use error::{Error, Result};
pub use geometry::{Camera, KnnIndex, PointCloud};
