//! Dense tensors, a reverse-mode autodiff tape, and the Adam optimizer.
//!
//! Everything numeric in the crate runs through [`Graph`]: model code records
//! operations on a fresh graph per batch, calls [`Graph::backward`], moves the
//! parameter gradients into the [`ParamStore`] and takes an [`adam_step`].

mod adam;
mod gemm;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::softmax_in_place;

/// Row-wise softmax of a plain tensor over its last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    out.reset_grad();
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    out
}
