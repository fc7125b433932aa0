//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod gemm;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{gelu, log_sigmoid, relu, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{focal_term, softmax_rows};

/// Softmax along the last axis of `x`.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let n = out.last_dim();
    softmax_rows(out.data_mut(), n);
    out
}
