//! Canopy height mapping from Sentinel-like 10 m time series: raster
//! kernels, data assembly, a procedural scene generator, the
//! super-resolution + temporal-attention models with their baselines,
//! the training loop, tiled inference, and evaluation metrics.

pub mod assembly;
pub mod dates;
pub mod error;
pub mod geotiff;
pub mod ingest;
pub mod manifest;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};
