//! Coarse-to-fine hierarchical image classification on the CPU.
//!
//! The crate builds a two-level category hierarchy from a flat classifier's
//! confusion structure, assembles shared, coarse and fine network components
//! over that hierarchy, trains them in stages, and serves predictions with
//! conditional execution and product-quantized parameters.

pub mod engine;
pub mod error;
pub mod harness;
pub mod hierarchy;
pub mod model;
pub mod runtime;
pub mod trainer;

pub use error::{Error, Result};
