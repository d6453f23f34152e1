//! Depth-distribution guided hierarchical volumetric sampling.
//!
//! A coarse pass predicts, per ray interval, a truncated-Gaussian depth
//! distribution in addition to color and density. The resulting mixture
//! guides the fine sampling pass, and a distribution-estimation loss pulls
//! the predicted mixture toward the fine pass histogram. Everything runs on
//! the CPU in f64, with synthetic analytic scenes as ground truth.

pub mod cli;
pub mod error;
pub mod math;
pub mod losses;
pub mod radiance_field;
pub mod ray_distribution;
pub mod sampling_pipeline;
pub mod scene_toolkit;
pub mod volume_rendering;

pub use error::{DdError, Result};
