//! Reinforcement learning by improving stored experiences.
//!
//! Every rollout step is annotated with an improved policy mean, one
//! KL-bounded policy-gradient step away from the mean that generated it. A
//! learned interpolator (a Neural Process or a Mean Kernel Interpolator)
//! then acts by interpolating those improved means over the replay memory.

pub mod agent;
pub mod env;
pub mod error;
pub mod harness;
pub mod improve;
pub mod memory;
pub mod mki;
pub mod nn;
pub mod np;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
