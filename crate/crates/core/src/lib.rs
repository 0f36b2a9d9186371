//! Cascaded interaction network for salient object detection.
//!
//! A small CPU-only implementation: tensors with reverse-mode autodiff, the
//! multi-scale interaction model with shared attention, eroded deep
//! supervision, metrics, and the training pipeline.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod resample;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
