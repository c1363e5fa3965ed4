//! FormerTime: a hierarchical transformer for multivariate time-series
//! classification, built on a small reverse-mode autodiff engine.
//!
//! Pipeline: [`data`] loads or synthesizes series; [`model`] stacks stages of
//! [`slicing`] partition, positional encoding and [`encoder`] blocks built
//! around temporal reduction [`attention`]; [`training`] runs Adam with
//! cross-entropy and reports accuracy.

pub mod attention;
pub mod config;
pub mod data;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod model;
pub mod slicing;
pub mod training;

pub use error::{Error, Result};
