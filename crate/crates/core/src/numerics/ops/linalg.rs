use crate::error::{dim_err, Result};
use crate::numerics::counters;
use crate::numerics::graph::{Grads, Graph, Op, Var};
use crate::numerics::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::numerics::tensor::{strides, Tensor};

/// Batch layout of a `[.., m, k] · [.., k, n]` product after broadcasting
/// the leading extents.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// `(a_batch, b_batch)` block index for every output batch.
    pairs: Vec<(usize, usize)>,
}

fn plan(sa: &[usize], sb: &[usize]) -> Result<MatmulPlan> {
    if sa.len() < 2 || sb.len() < 2 {
        return dim_err(format!("matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return dim_err(format!("matmul inner extents differ: {sa:?} · {sb:?}"));
    }
    let ba = &sa[..sa.len() - 2];
    let bb = &sb[..sb.len() - 2];
    let rank = ba.len().max(bb.len());
    let mut batch = vec![0; rank];
    for i in 0..rank {
        let da = if i + ba.len() >= rank { ba[i + ba.len() - rank] } else { 1 };
        let db = if i + bb.len() >= rank { bb[i + bb.len() - rank] } else { 1 };
        batch[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return dim_err(format!("matmul batch extents do not broadcast: {sa:?} · {sb:?}")),
        };
    }
    let bstride = |src: &[usize]| -> Vec<usize> {
        let s = strides(src);
        (0..rank)
            .map(|i| {
                if i + src.len() < rank {
                    0
                } else {
                    let j = i + src.len() - rank;
                    if src[j] == 1 {
                        0
                    } else {
                        s[j]
                    }
                }
            })
            .collect()
    };
    let (sa_b, sb_b) = (bstride(ba), bstride(bb));
    let total: usize = batch.iter().product();
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0; rank];
    for _ in 0..total {
        let oa = idx.iter().zip(&sa_b).map(|(i, s)| i * s).sum();
        let ob = idx.iter().zip(&sb_b).map(|(i, s)| i * s).sum();
        pairs.push((oa, ob));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < batch[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan { m, k, n, out_shape, pairs })
}

impl Graph {
    /// Batched matrix product with broadcast leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let p = plan(ta.shape(), tb.shape())?;
        let (m, k, n) = (p.m, p.k, p.n);
        let mut out = vec![0.0; p.pairs.len() * m * n];
        if tb.rank() == 2 {
            // the right operand is shared by every batch: one tall product
            let rows = ta.numel() / k;
            gemm_nn(rows, k, n, ta.data(), tb.data(), &mut out);
        } else {
            for (bi, &(oa, ob)) in p.pairs.iter().enumerate() {
                gemm_nn(
                    m,
                    k,
                    n,
                    &ta.data()[oa * m * k..(oa + 1) * m * k],
                    &tb.data()[ob * k * n..(ob + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        counters::add_matmul((p.pairs.len() * m * k * n) as u64);
        let value = Tensor::new(&p.out_shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b })
    }
}

pub(super) fn matmul_backward(a: Var, b: Var, g: &[f64], grads: &mut Grads) {
    let ta = grads.value(a);
    let tb = grads.value(b);
    let p = plan(ta.shape(), tb.shape()).expect("shapes validated in forward");
    let (m, k, n) = (p.m, p.k, p.n);
    if tb.rank() == 2 {
        let rows = ta.numel() / k;
        if grads.wants(a) {
            gemm_nt(rows, n, k, g, tb.data(), grads.slot(a));
        }
        if grads.wants(b) {
            gemm_tn(k, rows, n, ta.data(), g, grads.slot(b));
        }
        return;
    }
    for (bi, &(oa, ob)) in p.pairs.iter().enumerate() {
        let gb = &g[bi * m * n..(bi + 1) * m * n];
        if grads.wants(a) {
            let slot = &mut grads.slot(a)[oa * m * k..(oa + 1) * m * k];
            gemm_nt(m, n, k, gb, &tb.data()[ob * k * n..(ob + 1) * k * n], slot);
        }
        if grads.wants(b) {
            let slot = &mut grads.slot(b)[ob * k * n..(ob + 1) * k * n];
            gemm_tn(k, m, n, &ta.data()[oa * m * k..(oa + 1) * m * k], gb, slot);
        }
    }
}
