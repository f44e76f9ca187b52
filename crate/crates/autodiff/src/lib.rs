//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Primitives evaluate eagerly
//! and record themselves; [`Graph::backward`] walks the record in reverse and
//! accumulates exact vector-Jacobian products into the leaves.
//!
//! ```
//! use autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![0.0]));
//! let y = g.sigmoid(x);
//! let s = g.sum(y);
//! g.backward(s).unwrap();
//! assert_eq!(g.value(y).item(), 0.5);
//! assert_eq!(g.grad(x).unwrap().item(), 0.25);
//! ```

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{
    grad_check, grad_check_many, grad_check_reference, relative_error, GradCheckReport,
};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
