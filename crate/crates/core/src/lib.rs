//! Toolkit for training, tuning, and calibrating deep ensembles, built to
//! measure the difference between tuning each member on its own and tuning
//! the ensemble as a whole.
//!
//! - [`netcore`]: MLP engine with exact backprop, SGD/Adam, gradient checks.
//! - [`splits`]: shared, disjoint, and overlapping holdout plans.
//! - [`metrics`]: NLL, error, ECE, entropy, diversity, ambiguity.
//! - [`calibration`]: individual, joint, and pool-then-calibrate temperature scaling.
//! - [`training`]: member training and individual/joint early stopping.
//! - [`batchensemble`]: rank-1 fast-weight ensembles with per-member batch norm.
//! - [`tuning`]: weight-decay grid search and the ensemble optimality gap.
//! - [`harness`]: datasets, experiment orchestration, and reports.

pub mod batchensemble;
pub mod calibration;
pub mod data;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod netcore;
pub mod rng;
pub mod splits;
pub mod training;
pub mod tuning;

pub use error::{Error, Result};
