pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod margin;
pub mod metrics;
pub mod optim;
pub mod retrieval;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
