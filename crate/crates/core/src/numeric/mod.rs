//! Dense tensors, parameter storage and a recorded graph with reverse-mode
//! automatic differentiation.

mod attention;
pub mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use attention::{AttentionBlock, AttentionLayout, BoolMask};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub(crate) use graph::softmax_in_place;

/// Row-wise softmax of a plain slice with `cols` columns.
pub fn softmax_rows<T: Scalar>(values: &[T], cols: usize) -> Vec<T> {
    let mut out = values.to_vec();
    for row in out.chunks_mut(cols.max(1)) {
        softmax_in_place(row);
    }
    out
}
