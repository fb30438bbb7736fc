use crate::error::{config_err, Result};
use crate::numerics::counters;
use crate::numerics::graph::{Grads, Graph, Op, Var};
use crate::numerics::tensor::Tensor;

/// Half-open input ranges `[start, end)` along one spatial axis, one per
/// output cell.
fn axis_windows(extent: usize, stride: usize, width: usize) -> Vec<(usize, usize)> {
    (0..extent.div_ceil(stride)).map(|i| (i * stride, (i * stride + width).min(extent))).collect()
}

/// Mean-pooling geometry over a `[b, h, w, c]` input.
#[derive(Debug)]
pub(crate) struct Windows {
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl Windows {
    fn new(h: usize, w: usize, r: usize, overlap: bool) -> Self {
        let width = if overlap { r + 1 } else { r };
        Self { rows: axis_windows(h, r, width), cols: axis_windows(w, r, width) }
    }
}

fn check(shape: &[usize], r: usize) -> Result<()> {
    if r < 1 {
        return config_err("pooling ratio must be at least 1");
    }
    if shape.len() != 4 {
        return crate::error::dim_err(format!("pooling expects [b,h,w,c], got {shape:?}"));
    }
    Ok(())
}

impl Graph {
    /// Non-overlapping `r×r` mean pooling, ceil mode; edge windows average
    /// over their actual members.
    pub fn avg_pool2d(&mut self, x: Var, r: usize) -> Result<Var> {
        self.window_pool(x, r, false, "avg_pool2d")
    }

    /// Mean pooling with window `r+1` and stride `r`. The extra row and
    /// column overlap the next window; out-of-bounds members are skipped.
    pub fn overlapped_avg_pool2d(&mut self, x: Var, r: usize) -> Result<Var> {
        self.window_pool(x, r, true, "overlapped_avg_pool2d")
    }

    fn window_pool(&mut self, x: Var, r: usize, overlap: bool, name: &str) -> Result<Var> {
        let t = self.value(x);
        check(t.shape(), r)?;
        let &[b, h, w, c] = t.shape() else { unreachable!() };
        let win = Windows::new(h, w, r, overlap);
        let (ho, wo) = (win.rows.len(), win.cols.len());
        let xd = t.data();
        let mut out = vec![0.0; b * ho * wo * c];
        let mut reads = 0u64;
        for bi in 0..b {
            for (oy, &(y0, y1)) in win.rows.iter().enumerate() {
                for (ox, &(x0, x1)) in win.cols.iter().enumerate() {
                    let o = ((bi * ho + oy) * wo + ox) * c;
                    let dst = &mut out[o..o + c];
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let i = ((bi * h + y) * w + xx) * c;
                            dst.iter_mut().zip(&xd[i..i + c]).for_each(|(d, v)| *d += v);
                        }
                    }
                    let n = ((y1 - y0) * (x1 - x0)) as f64;
                    dst.iter_mut().for_each(|d| *d /= n);
                    reads += ((y1 - y0) * (x1 - x0) * c) as u64;
                }
            }
        }
        counters::add_pool(reads);
        let v = Tensor::new(&[b, ho, wo, c], out)?;
        self.push(name, v, Op::WindowPool { x, windows: win })
    }

    /// Non-overlapping `r×r` max pooling, ceil mode. Ties resolve to the
    /// first member in row-major order.
    pub fn max_pool2d(&mut self, x: Var, r: usize) -> Result<Var> {
        let t = self.value(x);
        check(t.shape(), r)?;
        let &[b, h, w, c] = t.shape() else { unreachable!() };
        let win = Windows::new(h, w, r, false);
        let (ho, wo) = (win.rows.len(), win.cols.len());
        let xd = t.data();
        let mut out = vec![f64::NEG_INFINITY; b * ho * wo * c];
        let mut argmax = vec![0usize; out.len()];
        for bi in 0..b {
            for (oy, &(y0, y1)) in win.rows.iter().enumerate() {
                for (ox, &(x0, x1)) in win.cols.iter().enumerate() {
                    let o = ((bi * ho + oy) * wo + ox) * c;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let i = ((bi * h + y) * w + xx) * c;
                            for ch in 0..c {
                                if xd[i + ch] > out[o + ch] {
                                    out[o + ch] = xd[i + ch];
                                    argmax[o + ch] = i + ch;
                                }
                            }
                        }
                    }
                }
            }
        }
        counters::add_pool(t.numel() as u64);
        let v = Tensor::new(&[b, ho, wo, c], out)?;
        self.push("max_pool2d", v, Op::MaxPool { x, argmax })
    }
}

pub(super) fn window_pool_backward(x: Var, win: &Windows, g: &[f64], grads: &mut Grads) {
    let &[b, h, w, c] = grads.value(x).shape() else { unreachable!() };
    let (ho, wo) = (win.rows.len(), win.cols.len());
    let dx = grads.slot(x);
    for bi in 0..b {
        for (oy, &(y0, y1)) in win.rows.iter().enumerate() {
            for (ox, &(x0, x1)) in win.cols.iter().enumerate() {
                let o = ((bi * ho + oy) * wo + ox) * c;
                let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let i = ((bi * h + y) * w + xx) * c;
                        for ch in 0..c {
                            dx[i + ch] += g[o + ch] * inv;
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn max_pool_backward(x: Var, argmax: &[usize], g: &[f64], grads: &mut Grads) {
    let dx = grads.slot(x);
    for (o, &i) in argmax.iter().enumerate() {
        dx[i] += g[o];
    }
}
