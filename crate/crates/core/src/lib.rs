//! Multi-frame point-level flow tracking for LiDAR single-object tracking.
//!
//! The pipeline turns consecutive LiDAR sweeps into bird's-eye-view feature
//! grids, fuses target evidence from older frames through a learnable query,
//! estimates per-cell flow of the target between the template and current
//! frame, and reduces that flow to one rigid motion of the target box.

pub mod bev;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod him;
pub mod ifh;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod pmm;
pub mod selftest;
pub mod seqio;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
