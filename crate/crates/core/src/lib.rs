//! Sparse-view Gaussian splatting with a rectified score-distillation prior.

pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod io;
pub mod rasterizer;
pub mod regularizers;
pub mod scene;
pub mod score;
pub mod synthetic;
pub mod trainer;
pub mod warp;
