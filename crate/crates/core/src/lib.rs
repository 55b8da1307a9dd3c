//! Bayesian inference for two-stage models where a first-stage exposure is
//! only available through draws from its partial posterior.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod engines;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod weighting;

pub use error::{Error, ErrorClass, Result};
