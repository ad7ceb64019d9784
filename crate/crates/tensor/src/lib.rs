//! Dense row-major `f64` tensors with a tape-based reverse-mode autodiff.
//!
//! The [`Graph`] records every executed operation in order. Calling
//! [`Graph::backward`] replays the record in reverse and accumulates
//! gradients into the leaves that asked for them. Parameters live in a
//! [`ParamStore`] and are bound into a fresh graph for every forward pass.

mod error;
mod gemm;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod optim;
mod params;
pub mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::gradient_check;
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::GaussianRng;
pub use tensor::Tensor;

/// Reference kernels used by tests as independent oracles.
pub mod reference {
    pub use crate::kernels::{conv2d_naive, matmul_naive};
}
