pub mod dataset;
pub mod error;
pub mod eval;
pub mod grid;
pub mod metrics;
pub mod modal;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
