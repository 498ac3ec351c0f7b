pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod perceptual;
pub mod planner;
pub mod rng;
pub mod rollout;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
