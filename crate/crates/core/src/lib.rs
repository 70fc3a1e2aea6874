//! Depth-only LiDAR completion with coupled local/global U-Nets.
//!
//! The crate covers the whole pipeline: synthetic data generation, KITTI
//! depth PNG I/O, area partition analysis, confidence-gated outlier
//! removal, a small reverse-mode differentiation engine, the coupled
//! network with confidence fusion, and training/evaluation drivers.

pub mod area;
pub mod config;
pub mod depth_io;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod outlier;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
pub use grid::{ConfidenceMap, DepthMap, Grid, Mask, SparseDepthMap};
