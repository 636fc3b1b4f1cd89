//! Deterministic f64 reverse-mode autodiff with the handful of ops a
//! convolutional raster-regression stack needs, plus layers, Adam and a
//! named-array checkpoint format.
//!
//! Determinism contract: given the same inputs, parameters and seeds,
//! every forward and backward pass produces bit-identical results
//! regardless of thread count. Parallel kernels split work on fixed
//! boundaries and reduce partial sums in index order.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod layers;
pub mod ops;
pub mod ops_seq;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use graph::{Arr, Graph, Var};
pub use layers::{Conv2d, ConvBlock, GroupNorm};
pub use params::{GradStore, ParamId, ParamSet, Session};
