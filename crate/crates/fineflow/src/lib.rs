//! Fine-grained flow inference: recover an `nI x nJ` flow map from its
//! `I x J` aggregate while keeping every `n x n` block summing exactly to
//! the observed superregion flow.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod external;
pub mod grid;
pub mod model;
pub mod nn;
pub mod selfcheck;
pub mod train;

pub use error::{Error, Result};
