pub mod agent;
pub mod dataset;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod neural;
pub mod rng;
pub mod vae;
pub mod world;

pub use error::{Error, Result};
