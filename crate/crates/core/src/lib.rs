//! Region-specific average treatment effect (RSATE) estimation for
//! multi-regional randomized trials.
//!
//! The crate covers the whole analysis path: loading and matching trial
//! data, nuisance-model fitting, no-borrowing / full-borrowing doubly robust
//! estimators with inverse-variance-weighted predictions, CV+ conformal
//! p-values, conformal selective borrowing with a bootstrap MSE-guided
//! threshold, the conditional Fisher randomization test, the multi-region
//! extension, and a Monte Carlo harness for simulation studies.

pub mod conformal;
pub mod csb;
pub mod data;
pub mod error;
pub mod estimators;
pub mod frt;
pub mod methods;
pub mod models;
pub mod multiregion;
pub mod seed;
pub mod sim;

mod frame;

pub use error::{Error, Result};
