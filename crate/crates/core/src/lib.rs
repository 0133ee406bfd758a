//! Fully Bayesian Robit classification with heavy-tailed (Cauchy) priors.
//!
//! The crate samples the posterior of a sparse Robit classifier with a
//! restricted Gibbs sampler whose coefficient updates are Hamiltonian Monte
//! Carlo trajectories, then turns the draws into a ranked list of compact
//! feature subsets, scores those subsets by leave-one-out cross-validation and
//! makes out-of-sample predictions.
//!
//! Conventions used throughout:
//!
//! * Design matrices are `n × p` [`nalgebra::DMatrix`] values without an
//!   intercept column. Labels are `u8` values in `{0, 1}`.
//! * Coefficient vectors that include an intercept store it at index 0, so
//!   the coefficient of column `c` (0-based) lives at index `c + 1`.
//! * A *feature ID* is that coefficient index: feature IDs are 1-based and
//!   always refer to columns of the dataset the chain was started on.

pub mod baselines;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod io;
pub mod math;
pub mod prediction;
pub mod sampler;
pub mod subsets;

pub use error::{FbrhtError, Result};
