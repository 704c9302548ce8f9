//! Dense `f64` tensors and a recorded-tape reverse-mode autodiff engine.
//!
//! The op set is closed: it covers exactly what perturbative generators,
//! convolutional and perturbative critics, and the WGAN gradient penalty need.
//! Gradients are recorded as ordinary tape nodes, which gives second-order
//! derivatives (double backprop) without a separate mechanism.

pub mod grad;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use grad::{finite_difference_check, grad, gradient, gradient_of_gradient_norm, gradient_penalty};
pub use kernels::ConvGeom;
pub use tape::{NodeId, Op, Tape};
pub use tensor::{Tensor, PTNS_MAGIC, PTNS_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape {shape:?} holds {} elements but {len} were given", shape.iter().product::<usize>())]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("op {index} ({op}): {detail}")]
    OpShape {
        index: usize,
        op: &'static str,
        detail: String,
    },
    #[error("op {index} ({op}) produced a non-finite value")]
    NonFinite { index: usize, op: &'static str },
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("node {0} is not on the tape")]
    UnknownNode(usize),
    #[error("no input named {0:?} on the tape")]
    UnknownInput(String),
    #[error("input name {0:?} already bound")]
    DuplicateName(String),
    #[error("op {index} ({op}) has no second-order rule; it cannot appear on a differentiated gradient path")]
    MissingSecondOrderRule { index: usize, op: &'static str },
    #[error("tensor format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
