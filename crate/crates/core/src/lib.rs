pub mod archive;
pub mod config;
pub mod covariance;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod predict;
pub mod rng;
pub mod sampler;
pub mod simulate;

pub use error::{Result, SfError};
