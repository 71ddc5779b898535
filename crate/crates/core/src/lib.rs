//! Variational empirical Bayes for high-dimensional Bayesian linear regression.
//!
//! The crate estimates the hyperparameters of an i.i.d. prior by maximizing
//! the naive mean-field evidence bound, evaluates the limiting covariance and
//! bias of that estimator, runs mean-field posterior inference with
//! calibrated credible intervals, and checks everything against Gibbs
//! sampling and exact enumeration.

pub mod asymptotics;
pub mod design;
pub mod error;
pub mod estimators;
#[cfg(feature = "harness")]
pub mod harness;
pub mod inference;
pub mod meanfield;
pub mod optimize;
pub mod posterior_oracle;
pub mod priors;
pub mod quadrature;
pub mod rng;
pub mod timing;

pub use error::{Error, Result};
pub use priors::{FamilyId, PriorFamily, TiltParams, TiltedMoments};
