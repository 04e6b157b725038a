//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every backward rule is expressed with the same recorded operations as the
//! forward pass, so a gradient obtained with `create_graph` is an ordinary
//! node that can itself be differentiated. The attack objective depends on
//! parameter gradients of the model, which makes this second-order path
//! mandatory.
//!
//! ```
//! use ara_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let dx = g.grad(y, &[x]).unwrap();
//! assert_eq!(dx[0].item(), 6.0);
//! ```

mod backward;
mod graph;
mod tensor;

pub use backward::{GradQuery, Gradients};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    InvalidTensor { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("{op} on empty input")]
    Empty { op: &'static str },
}
