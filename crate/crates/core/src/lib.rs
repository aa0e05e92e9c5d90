//! Weakly supervised semantic segmentation on top of a frozen vision-language backbone.

pub mod archive;
pub mod backbone;
pub mod camgen;
pub mod datakit;
pub mod decoder;
pub mod error;
pub mod nn;
pub mod rfm;
pub mod training;

pub use error::{Error, Result};
