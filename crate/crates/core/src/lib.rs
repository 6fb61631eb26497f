//! Siamese bi-temporal change detection.
//!
//! A shared pretrained encoder embeds both acquisitions, the per-level
//! feature difference is decoded by a UPerNet head into a per-pixel change
//! probability.

pub mod backbones;
pub mod benchmark;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod nn;
pub mod presets;
pub mod schedulers;
pub mod trainer;

pub use candle_core::{DType, Device};
pub use error::{Error, ErrorClass, Result};
