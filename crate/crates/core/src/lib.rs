//! Simulation and benchmarking of space-time radar target localization.
//!
//! A single moving point target is placed in a range × azimuth × velocity
//! processing region, returns are synthesized in Gaussian clutter plus noise,
//! NAMF heatmaps are formed, and three azimuth/velocity estimators (peak cell
//! midpoint, gradient descent, a small convolutional regressor) are compared
//! against the Cramér-Rao bound.

pub mod bench;
pub mod crb;
pub mod error;
pub mod estimators;
pub mod heatmap;
pub mod io;
pub mod learned;
pub mod linalg;
pub mod rng;
pub mod scene;
pub mod stats;
pub mod steering;
pub mod synth;

pub use error::{Error, Result};
