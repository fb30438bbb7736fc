use crate::error::{dim_err, Error, Result};
use crate::numerics::graph::{Grads, Graph, Op, Var};
use crate::numerics::tensor::Tensor;

use super::norm::softmax_in_place;

impl Graph {
    /// Mean cross-entropy of `logits: [.., classes]` against one target per
    /// position; `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let classes = *t.shape().last().unwrap();
        if t.numel() / classes != targets.len() {
            return dim_err(format!(
                "cross entropy over {:?} needs {} targets, got {}",
                t.shape(),
                t.numel() / classes,
                targets.len()
            ));
        }
        let mut probs = t.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (row, target) in probs.chunks_mut(classes).zip(targets) {
            softmax_in_place(row);
            if let Some(c) = *target {
                if c >= classes {
                    return Err(Error::Dimension(format!("target class {c} out of range {classes}")));
                }
                total -= row[c].max(f64::MIN_POSITIVE).ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Usage("cross entropy with every target ignored".into()));
        }
        let v = Tensor::scalar(total / count as f64);
        self.push("cross_entropy", v, Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count })
    }
}

pub(super) fn cross_entropy_backward(
    logits: Var,
    targets: &[Option<usize>],
    probs: &[f64],
    count: usize,
    g: &[f64],
    grads: &mut Grads,
) {
    let classes = probs.len() / targets.len();
    let scale = g[0] / count as f64;
    let slot = grads.slot(logits);
    for (i, target) in targets.iter().enumerate() {
        let Some(c) = *target else { continue };
        let row = &probs[i * classes..(i + 1) * classes];
        let dst = &mut slot[i * classes..(i + 1) * classes];
        for j in 0..classes {
            dst[j] += scale * (row[j] - if j == c { 1.0 } else { 0.0 });
        }
    }
}
