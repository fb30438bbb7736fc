//! Differentiable operations, one file per family. Each family adds its
//! forward methods to [`Graph`](super::Graph) and supplies the matching
//! backward rule dispatched from [`backward`].

pub(crate) mod conv;
pub(crate) mod elementwise;
pub(crate) mod linalg;
pub(crate) mod loss;
pub(crate) mod norm;
pub(crate) mod pool;
pub(crate) mod resample;
pub(crate) mod shape;

use super::graph::{Grads, Op};
use super::tensor::Tensor;

pub(crate) fn backward(op: &Op, out: &Tensor, g: &[f64], grads: &mut Grads) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => linalg::matmul_backward(*a, *b, g, grads),
        Op::Add { a, b } => elementwise::add_backward(*a, *b, out, g, grads),
        Op::Mul { a, b } => elementwise::mul_backward(*a, *b, out, g, grads),
        Op::Scale { x, s } => grads.accumulate(*x, g.iter().map(|v| v * s).collect()),
        Op::Gelu { x } => elementwise::gelu_backward(*x, g, grads),
        Op::Softmax { x } => norm::softmax_backward(*x, out, g, grads),
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            norm::layer_norm_backward(*x, *gamma, *beta, xhat, rstd, g, grads)
        }
        Op::WindowPool { x, windows } => pool::window_pool_backward(*x, windows, g, grads),
        Op::MaxPool { x, argmax } => pool::max_pool_backward(*x, argmax, g, grads),
        Op::Conv2d { x, k, geom, cols } => conv::conv2d_backward(*x, *k, geom, cols, g, grads),
        Op::DepthwiseConv2d { x, k, pad } => conv::depthwise_backward(*x, *k, *pad, g, grads),
        Op::Upsample { x, rows, cols } => resample::upsample_backward(*x, rows, cols, g, grads),
        Op::Reshape { x } => grads.accumulate(*x, g.to_vec()),
        Op::Permute { x, perm } => shape::permute_backward(*x, perm, out, g, grads),
        Op::Concat { parts } => shape::concat_backward(parts, g, grads),
        Op::Sum { x } => {
            let n = grads.value(*x).numel();
            grads.accumulate(*x, vec![g[0]; n]);
        }
        Op::Mean { x } => {
            let n = grads.value(*x).numel();
            grads.accumulate(*x, vec![g[0] / n as f64; n]);
        }
        Op::CrossEntropy { logits, targets, probs, count } => {
            loss::cross_entropy_backward(*logits, targets, probs, *count, g, grads)
        }
    }
}
