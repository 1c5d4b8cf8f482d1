//! CPU-only differentiable 4D Gaussian splatting with semantic scene
//! decomposition, a time-embedded deformation field and KNN ground
//! regularization.

pub mod container;
pub mod deform;
pub mod encoding;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod knn;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod mlp;
pub mod optim;
pub mod project;
pub mod raster;
pub mod render;
pub mod scenegen;
pub mod semantics;
pub mod sky;
pub mod ssim;
pub mod train;
pub mod types;

pub use error::{Error, Result};
