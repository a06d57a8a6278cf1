//! A small reverse-mode differentiation engine over dense `f64` tensors.
//!
//! Operations are recorded on a [`Graph`] as they are evaluated. Parameters
//! live outside the graph in a [`ParamSet`] and are referenced by
//! [`ParamId`], so one parameter set can back many short-lived graphs.
//!
//! ```
//! use diffcore::{Graph, ParamSet, Tensor};
//!
//! let mut params = ParamSet::new();
//! let w = params.insert("w", Tensor::row(&[1.0, -2.0])).unwrap();
//! let mut g = Graph::new(&params);
//! let wv = g.param(w);
//! let sq = g.mul(wv, wv).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.param(w).data(), &[2.0, -4.0]);
//! ```

mod error;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, relative_error, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamSet};
pub use tensor::Tensor;
