pub mod agent;
pub mod archive;
pub mod config;
pub mod pipeline;
pub mod env;
pub mod features;
pub mod repnet;
pub mod rewardnet;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
