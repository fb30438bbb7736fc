//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Layout is channel-last (`[b, h, w, c]`) throughout; attention tokens are
//! the flattened `h·w` axis.

pub mod counters;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod ops;
pub mod serialize;
mod tensor;

pub use graph::{Graph, Var};
pub use ops::conv::conv_out_extent;
pub use ops::elementwise::{gelu, gelu_grad};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-6;
