//! Conditional meta-network blind super-resolution.
//!
//! The crate synthesizes multi-degraded low-resolution images, learns a
//! task-level degradation feature from a small support set of LR patches,
//! rescales the convolution filters of an SR backbone with that feature, and
//! restores LR images with a single forward adaptation step.

pub mod backbone;
pub mod checkpoint;
pub mod condition;
pub mod degradation;
pub mod error;
pub mod eval;
pub mod exec;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
