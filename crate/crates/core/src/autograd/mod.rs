//! A small reverse-mode automatic differentiation engine over dense
//! `f32`/`f64` tensors, with the operations the restoration network needs.

mod conv;
mod nn;
mod ops;
mod scalar;
mod tensor;
mod var;

pub use scalar::Scalar;
pub use tensor::Tensor;
pub use var::{Gradients, Var};
