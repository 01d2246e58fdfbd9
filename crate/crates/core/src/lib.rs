//! Conditional diffusion with label-dependent diagonal noise covariance.

pub mod cli;
pub mod config;
pub mod covariance;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod sampler;
pub mod stats;
pub mod synthdata;
pub mod verify;
pub mod vicinity;

pub use error::{Error, Result};
