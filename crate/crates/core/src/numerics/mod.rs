//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_graph, finite_diff_check};
pub use graph::{gelu, sigmoid, AttentionSpec, Graph, NodeId, OpKind};
pub(crate) use graph::log_sum_exp;
pub use tensor::Tensor;
