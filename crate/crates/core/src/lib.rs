pub mod categorical;
pub mod cli;
pub mod continuous;
pub mod data;
pub mod error;
pub mod glm;
pub mod isotonic;
pub mod metrics;
pub mod model;
pub mod smoothing;
pub mod synth;

pub use error::{Error, Result};
