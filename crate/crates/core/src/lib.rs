pub mod autodiff;
pub mod cohort;
pub mod error;
pub mod experiment;
pub mod fixtures;
pub mod graph;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod train;
pub mod rng;

pub use error::{Error, Result};
