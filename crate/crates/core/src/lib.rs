//! Geometry and guidance machinery for satellite-to-street-view diffusion
//! synthesis.

pub mod config;
pub mod diffusion;
pub mod error;
pub mod gca;
pub mod geometry;
pub mod metrics;
pub mod models;
pub mod pose_align;
pub mod raster;
pub mod rng;
pub mod selfcheck;
pub mod synthdata;
pub mod text_guidance;

pub use error::{Error, Result};
pub use raster::Raster;
pub use rng::Rng;
