//! Budgeted variable selection for spatio-temporal forecasting: a masked
//! attention forecaster whose input variables and attention dimensions are
//! pruned jointly, with graph-and-similarity extrapolation to the variables
//! left out.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pruning;
pub mod replay;
pub mod seed;
pub mod training;
pub mod vip;

pub use error::{Error, Result};
