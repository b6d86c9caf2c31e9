//! Training-time explanation regularization for MLPs, with the explainers,
//! metrics and interactive task used to evaluate it.

pub mod data;
pub mod engine;
pub mod error;
pub mod explain;
pub mod linalg;
pub mod metrics;
pub mod neighborhood;
pub mod regularize;
pub mod rng;
pub mod task;

pub use error::{Error, Result};
