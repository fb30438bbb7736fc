use crate::error::{dim_err, Result};
use crate::numerics::graph::{Grads, Graph, Op, Var};
use crate::numerics::tensor::{strides, Tensor};

/// How an operand maps onto the broadcast output.
enum Layout {
    Same,
    /// The operand's shape is a trailing suffix of the output; it repeats.
    Tiled(usize),
    /// General case: output index -> operand offset via zero strides.
    Strided(Vec<usize>),
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pick = |s: &[usize], i: usize| if i + s.len() >= rank { s[i + s.len() - rank] } else { 1 };
    (0..rank)
        .map(|i| match (pick(a, i), pick(b, i)) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => dim_err(format!("shapes {a:?} and {b:?} do not broadcast")),
        })
        .collect()
}

fn layout(src: &[usize], out: &[usize]) -> Layout {
    if src == out {
        return Layout::Same;
    }
    if src.len() <= out.len() && out[out.len() - src.len()..] == *src {
        return Layout::Tiled(src.iter().product());
    }
    let s = strides(src);
    let rank = out.len();
    Layout::Strided(
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
            .collect(),
    )
}

/// Operand offset for every output position.
fn offsets(layout: &Layout, out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    match layout {
        Layout::Same => (0..n).collect(),
        Layout::Tiled(period) => (0..n).map(|i| i % period).collect(),
        Layout::Strided(st) => {
            let mut idx = vec![0; out.len()];
            let mut res = Vec::with_capacity(n);
            for _ in 0..n {
                res.push(idx.iter().zip(st).map(|(i, s)| i * s).sum());
                for ax in (0..out.len()).rev() {
                    idx[ax] += 1;
                    if idx[ax] < out[ax] {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
            res
        }
    }
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let (la, lb) = (layout(a.shape(), &shape), layout(b.shape(), &shape));
    let data = match (&la, &lb) {
        (Layout::Same, Layout::Same) => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        (Layout::Same, Layout::Tiled(p)) => {
            a.data().chunks(*p).flat_map(|chunk| chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y))).collect()
        }
        _ => {
            let (oa, ob) = (offsets(&la, &shape), offsets(&lb, &shape));
            oa.iter().zip(&ob).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect()
        }
    };
    Tensor::new(&shape, data)
}

/// Sums `g` (laid out as `out`) back onto an operand of shape `src`.
fn reduce_into(g: &[f64], out: &[usize], src: &[usize], dst: &mut [f64], scale: impl Fn(usize) -> f64) {
    match layout(src, out) {
        Layout::Same => dst.iter_mut().zip(g).enumerate().for_each(|(i, (d, v))| *d += v * scale(i)),
        Layout::Tiled(p) => {
            for (c, chunk) in g.chunks(p).enumerate() {
                for (j, (d, v)) in dst.iter_mut().zip(chunk).enumerate() {
                    *d += v * scale(c * p + j);
                }
            }
        }
        l @ Layout::Strided(_) => {
            for (i, off) in offsets(&l, out).into_iter().enumerate() {
                dst[off] += g[i] * scale(i);
            }
        }
    }
}

impl Graph {
    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self.value(a), self.value(b), |x, y| x + y)?;
        self.push("add", v, Op::Add { a, b })
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self.value(a), self.value(b), |x, y| x * y)?;
        self.push("mul", v, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::new(t.shape(), t.data().iter().map(|v| v * s).collect())?;
        self.push("scale", v, Op::Scale { x, s })
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::new(t.shape(), t.data().iter().map(|&v| gelu(v)).collect())?;
        self.push("gelu", v, Op::Gelu { x })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(super) fn add_backward(a: Var, b: Var, out: &Tensor, g: &[f64], grads: &mut Grads) {
    for v in [a, b] {
        if grads.wants(v) {
            let src = grads.value(v).shape();
            reduce_into(g, out.shape(), src, grads.slot(v), |_| 1.0);
        }
    }
}

pub(super) fn mul_backward(a: Var, b: Var, out: &Tensor, g: &[f64], grads: &mut Grads) {
    let (ta, tb) = (grads.value(a), grads.value(b));
    let shape = out.shape();
    for (v, other) in [(a, tb), (b, ta)] {
        if !grads.wants(v) {
            continue;
        }
        let other_off = offsets(&layout(other.shape(), shape), shape);
        let od = other.data();
        let src = grads.value(v).shape();
        reduce_into(g, shape, src, grads.slot(v), |i| od[other_off[i]]);
    }
}

pub(super) fn gelu_backward(x: Var, g: &[f64], grads: &mut Grads) {
    let xs = grads.value(x).data();
    grads.accumulate(x, xs.iter().zip(g).map(|(&v, &gv)| gv * gelu_grad(v)).collect());
}
