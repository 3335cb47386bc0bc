//! Command-line pipeline for burned-area segmentation: synthetic data,
//! preparation, spatial splitting, training, prediction and evaluation.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod synth;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
