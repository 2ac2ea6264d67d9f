//! X-ray to EM volume reconstruction with per-voxel Gaussian uncertainty and
//! a membrane-segmentation consistency constraint.

pub mod cli;
pub mod error;
pub mod evalsuite;
pub mod losses;
pub mod phantom;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod models;
pub mod nn;
pub mod volcore;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision volume, the working type of training and inference.
pub type Volume32 = volcore::Volume<f32>;
/// Double-precision volume, used by reference computations.
pub type Volume64 = volcore::Volume<f64>;
