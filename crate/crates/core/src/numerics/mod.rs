//! Dense tensors and reverse-mode autodiff.

mod check;
mod tape;
mod tensor;

pub use check::grad_check;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
