//! Reverse-mode automatic differentiation over dense CPU tensors.
//!
//! A [`Graph`] records operations performed on [`Var`] handles; calling
//! [`Graph::backward`] on a scalar walks the tape in reverse. Element types
//! are generic over [`Real`] so the same model code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

pub mod fd;
mod graph;
pub mod layers;
mod ops;
pub mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::Ctx;
pub use params::{init, ParamStore};
pub use tensor::{gemm, Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
}
