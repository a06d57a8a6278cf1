//! Counterfactual learning for sequence-to-sequence translation from logged
//! bandit feedback.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod feedback;
pub mod harness;
pub mod objectives;
pub mod optim;
pub mod policy;
pub mod rewards;
pub mod stats;

pub use error::{Error, Result};
