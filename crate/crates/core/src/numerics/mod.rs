//! Dense tensors and a tape-based reverse-mode differentiator covering the
//! operations the reconstruction network uses.

mod graph;
pub mod gradcheck;
mod params;
mod real;
mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Var};
pub use params::{fan_in_uniform, BoundParams, ParamId, ParamStore};
pub use real::{gemm, Real};
pub use tensor::Tensor;
