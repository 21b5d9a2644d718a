//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records a closed set of primitives during the forward pass;
//! [`Tape::backward`] returns exact gradients for every parameter that was
//! registered with [`Tape::param`]. [`OptimizerState`] applies them, and
//! [`finite_difference_check`] verifies them against central differences.

mod gradcheck;
pub mod kernels;
mod optim;
mod store;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport};
pub use optim::{Direction, OptimizerKind, OptimizerState};
pub use store::ParamStore;
pub use tape::{Axis, Gradients, ParamKey, Primitive, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data of length {len} does not fill shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("only rank <= 2 tensors are supported, got {shape:?}")]
    Rank { shape: Vec<usize> },
    #[error("{op} takes {expected} inputs, got {got}")]
    Arity { op: String, expected: usize, got: usize },
    #[error("index {index} out of range for {bound} rows")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("slice [{start}, {start}+{len}) out of range for shape {shape:?}")]
    SliceOutOfRange { shape: Vec<usize>, start: usize, len: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("no gradient for parameter {name} (group {group}, index {index})")]
    MissingGradient { group: u32, index: u32, name: String },
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    Epsilon(f64),
    #[error("oracle closure is not deterministic: {first} then {second}")]
    NondeterministicOracle { first: f64, second: f64 },
}
