//! Multi-label image classification with a multi-scale residual backbone and
//! a multi-head class-specific residual attention head.

pub mod error;
pub mod backbone;
pub mod cam;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod csra;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod ppm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use ops::Mode;
pub use tensor::{Scalar, Tensor};
