//! patholens: train transfer-learned CNN classifiers on lung/colon
//! histopathology tiles, evaluate them with a six-metric suite, and explain
//! their predictions with seven class-activation and saliency methods.

pub mod config;
pub mod dataset;
pub mod error;
pub mod models;
pub mod nn;
pub mod preprocess;

pub use error::{Error, Result};
