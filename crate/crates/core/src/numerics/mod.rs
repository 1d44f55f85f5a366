//! Dense `f64` tensors and reverse-mode differentiation.

mod graph;
mod kernels;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use params::{digest_hex, BoundParams, ParamSet};
pub use tensor::{softmax, Tensor};
