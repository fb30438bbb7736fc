use crate::error::{config_err, dim_err, Result};
use crate::numerics::graph::{Grads, Graph, Op, Var};
use crate::numerics::tensor::Tensor;

/// Two-point linear interpolation tap along one axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-center sampling positions; sources left of the first pixel
/// clamp to it.
fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

impl Graph {
    /// Bilinear upsampling of `[b,h,w,c]` to `[b,out_h,out_w,c]`
    /// (align-corners off).
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(x);
        let &[b, h, w, c] = t.shape() else {
            return dim_err(format!("upsample expects [b,h,w,c], got {:?}", t.shape()));
        };
        if out_h < h || out_w < w {
            return config_err(format!("upsample cannot shrink {h}x{w} to {out_h}x{out_w}"));
        }
        let (rows, cols) = (taps(h, out_h), taps(w, out_w));
        let xd = t.data();
        let mut out = vec![0.0; b * out_h * out_w * c];
        for bi in 0..b {
            for (oy, ry) in rows.iter().enumerate() {
                for (ox, rx) in cols.iter().enumerate() {
                    let o = ((bi * out_h + oy) * out_w + ox) * c;
                    let corners = [
                        (ry.lo, rx.lo, (1.0 - ry.frac) * (1.0 - rx.frac)),
                        (ry.lo, rx.hi, (1.0 - ry.frac) * rx.frac),
                        (ry.hi, rx.lo, ry.frac * (1.0 - rx.frac)),
                        (ry.hi, rx.hi, ry.frac * rx.frac),
                    ];
                    for (y, xx, wgt) in corners {
                        let i = ((bi * h + y) * w + xx) * c;
                        for ch in 0..c {
                            out[o + ch] += wgt * xd[i + ch];
                        }
                    }
                }
            }
        }
        let v = Tensor::new(&[b, out_h, out_w, c], out)?;
        self.push("bilinear_upsample", v, Op::Upsample { x, rows, cols })
    }
}

pub(super) fn upsample_backward(x: Var, rows: &[Tap], cols: &[Tap], g: &[f64], grads: &mut Grads) {
    let &[b, h, w, c] = grads.value(x).shape() else { unreachable!() };
    let (out_h, out_w) = (rows.len(), cols.len());
    let dx = grads.slot(x);
    for bi in 0..b {
        for (oy, ry) in rows.iter().enumerate() {
            for (ox, rx) in cols.iter().enumerate() {
                let o = ((bi * out_h + oy) * out_w + ox) * c;
                let corners = [
                    (ry.lo, rx.lo, (1.0 - ry.frac) * (1.0 - rx.frac)),
                    (ry.lo, rx.hi, (1.0 - ry.frac) * rx.frac),
                    (ry.hi, rx.lo, ry.frac * (1.0 - rx.frac)),
                    (ry.hi, rx.hi, ry.frac * rx.frac),
                ];
                for (y, xx, wgt) in corners {
                    let i = ((bi * h + y) * w + xx) * c;
                    for ch in 0..c {
                        dx[i + ch] += wgt * g[o + ch];
                    }
                }
            }
        }
    }
}
