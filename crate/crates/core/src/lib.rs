//! Surrogate-reward optimization for 1-2 step timestep-distilled diffusion
//! samplers on low-dimensional synthetic data: teacher/student diffusion
//! stack, the two-stage surrogate-reward pipeline, competing RL baselines,
//! and diagnostic probes.

pub mod analysis;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod consistency;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rewards;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
