//! Scene-conditioned diffusion over articulated body poses.

pub mod body;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod rng;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
pub use exec::Execution;
