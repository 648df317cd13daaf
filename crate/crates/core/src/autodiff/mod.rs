//! Reverse-mode automatic differentiation over dense 64-bit tensors.
//!
//! A [`Graph`] records every primitive applied to tensors that depend on a
//! trainable leaf. [`Graph::backward`] then sweeps the record in reverse and
//! returns gradients for the leaves. The graph is built fresh for every
//! forward pass, so variable-length sequences need no special handling.

mod gradcheck;
mod graph;
mod io;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_coords, primitive_checks, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use io::{read_tensors, write_tensor, TensorReader};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: non-finite value in result")]
    NonFinite { op: &'static str },
    #[error("{op}: invalid axis {axis}")]
    Axis { op: &'static str, axis: usize },
    #[error("{op}: empty axis")]
    EmptyAxis { op: &'static str },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("tensor `{name}`: {reason}")]
    Format { name: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
