//! LiDAR-only two-stage 3D human keypoint estimation.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assembly;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod kptr;
pub mod metrics;
pub mod num;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod plot;
pub mod scene_io;
pub mod stage1;
pub mod synth;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};

/// Single-precision model used for training and inference.
pub type Model32 = kptr::KptrModel<f32>;
/// Double-precision model used for gradient checks.
pub type Model64 = kptr::KptrModel<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
