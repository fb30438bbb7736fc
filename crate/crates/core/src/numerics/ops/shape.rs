use crate::error::{dim_err, Result};
use crate::numerics::graph::{Grads, Graph, Op, Var};
use crate::numerics::tensor::{permute_data, Tensor};

impl Graph {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape { x })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.rank()];
        if perm.len() != t.rank() || perm.iter().any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("{perm:?} is not a permutation of {} axes", t.rank()));
        }
        let (shape, data) = permute_data(t.shape(), t.data(), perm);
        let v = Tensor::new(&shape, data)?;
        self.push("permute", v, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return dim_err("transpose needs rank >= 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Joins tensors along the last axis; leading extents must agree.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        let lead = {
            let s = self.shape(first);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return dim_err(format!("concat leading extents differ: {lead:?} vs {s:?}"));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::new(&shape, out)?;
        self.push("concat", v, Op::Concat { parts: parts.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean { x })
    }
}

pub(super) fn permute_backward(x: Var, perm: &[usize], out: &Tensor, g: &[f64], grads: &mut Grads) {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let (_, data) = permute_data(out.shape(), g, &inv);
    grads.accumulate(x, data);
}

pub(super) fn concat_backward(parts: &[Var], g: &[f64], grads: &mut Grads) {
    let widths: Vec<usize> = parts.iter().map(|&p| *grads.value(p).shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let rows = g.len() / total;
    let mut offset = 0;
    for (&p, &wd) in parts.iter().zip(&widths) {
        if grads.wants(p) {
            let slot = grads.slot(p);
            for r in 0..rows {
                let src = &g[r * total + offset..r * total + offset + wd];
                slot[r * wd..(r + 1) * wd].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        offset += wd;
    }
}
