//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] records one forward construction; [`Graph::backward`]
//! consumes it and returns [`Gradients`]. Trainable tensors live in a
//! [`ParamStore`] and are bound into each new graph.

mod backward;
pub mod checkpoint;
mod error;
mod float;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use backward::Gradients;
pub use error::{AutodiffError, Result};
pub use float::{gemm, Float};
pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Bindings, Init, ParamId, ParamStore};
pub use tensor::{numel, Tensor};
