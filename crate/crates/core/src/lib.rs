//! Desk-scale 3D point-cloud instance segmentation with transformer instance
//! queries: dual position embedding, weighted farthest point sampling, and a
//! coarse/fine/merge progressive aggregation decoder with Hungarian target
//! assignment. Everything runs on the CPU in `f64` and is deterministic given
//! a seed.

pub mod autodiff;
pub mod config;
pub mod decoder;
pub mod encoding;
pub mod evalkit;
pub mod formats;
pub mod geometry;
pub mod linalg;
pub mod losses;
pub mod matching;
pub mod sampling;
pub mod trainkit;

mod error;
mod init;

pub use error::{Error, Result};
pub use linalg::Matrix;
