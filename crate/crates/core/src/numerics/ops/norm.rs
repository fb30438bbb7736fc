use crate::error::{config_err, dim_err, Result};
use crate::numerics::counters;
use crate::numerics::graph::{Grads, Graph, Op, Var};
use crate::numerics::tensor::Tensor;

impl Graph {
    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = *t.shape().last().expect("rank >= 1");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let v = Tensor::new(t.shape(), out)?;
        self.push("softmax", v, Op::Softmax { x })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return config_err(format!("layer norm epsilon must be positive, got {eps}"));
        }
        let t = self.value(x);
        let c = *t.shape().last().expect("rank >= 1");
        let (gm, bt) = (self.value(gamma), self.value(beta));
        if gm.shape() != [c] || bt.shape() != [c] {
            return dim_err(format!(
                "layer norm over {c} channels got gamma {:?} and beta {:?}",
                gm.shape(),
                bt.shape()
            ));
        }
        let rows = t.numel() / c;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gm.data()[j] + bt.data()[j];
            }
        }
        counters::add_norm(t.numel() as u64);
        let v = Tensor::new(t.shape(), out)?;
        self.push("layer_norm", v, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub(super) fn softmax_backward(x: Var, out: &Tensor, g: &[f64], grads: &mut Grads) {
    let c = *out.shape().last().unwrap();
    let y = out.data();
    let mut dx = vec![0.0; y.len()];
    for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
        let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            dr[j] = yr[j] * (gr[j] - dotp);
        }
    }
    grads.accumulate(x, dx);
}

pub(super) fn layer_norm_backward(
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    grads: &mut Grads,
) {
    let gm = grads.value(gamma).data();
    let c = gm.len();
    if grads.wants(gamma) {
        let slot = grads.slot(gamma);
        for (hr, gr) in xhat.chunks(c).zip(g.chunks(c)) {
            for j in 0..c {
                slot[j] += gr[j] * hr[j];
            }
        }
    }
    if grads.wants(beta) {
        let slot = grads.slot(beta);
        for gr in g.chunks(c) {
            for j in 0..c {
                slot[j] += gr[j];
            }
        }
    }
    if grads.wants(x) {
        let mut dx = vec![0.0; g.len()];
        for (r, ((dr, hr), gr)) in dx.chunks_mut(c).zip(xhat.chunks(c)).zip(g.chunks(c)).enumerate() {
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..c {
                let dh = gr[j] * gm[j];
                m1 += dh;
                m2 += dh * hr[j];
            }
            m1 /= c as f64;
            m2 /= c as f64;
            for j in 0..c {
                dr[j] = rstd[r] * (gr[j] * gm[j] - m1 - hr[j] * m2);
            }
        }
        grads.accumulate(x, dx);
    }
}
