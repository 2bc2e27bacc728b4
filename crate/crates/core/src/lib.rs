//! Jointly optimized diffractive optics and U-Net decoder for single-shot HDR
//! capture.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod image;
pub mod optics;
pub mod sensor;
pub mod training;

pub use error::{Error, Result};
