//! Active trajectory collection for offline reinforcement learning.

pub mod active;
pub mod baselines;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod offline;
pub mod planner;
pub mod repr;
pub mod restricted;
pub mod rng;

pub use error::{Error, Result};
