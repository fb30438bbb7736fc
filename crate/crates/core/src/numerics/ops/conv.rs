use crate::error::{config_err, dim_err, Result};
use crate::numerics::counters;
use crate::numerics::graph::{Grads, Graph, Op, Var};
use crate::numerics::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.b * self.ho * self.wo
    }

    /// Input offset for (batch, output row, output col, ky, kx), or `None`
    /// when the tap falls in the zero padding.
    fn source(&self, bi: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then(|| ((bi * self.h + iy) * self.w + ix) * self.cin)
    }
}

/// Output extent of a strided, zero-padded window sweep.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (kernel <= padded && stride > 0).then(|| (padded - kernel) / stride + 1)
}

impl Graph {
    /// Dense 2-D cross-correlation of `x: [b,h,w,cin]` with
    /// `k: [kh,kw,cin,cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        let (&[b, h, w, cin], &[kh, kw, kc, cout]) = (tx.shape(), tk.shape()) else {
            return dim_err(format!(
                "conv2d expects [b,h,w,c] input and [kh,kw,cin,cout] kernel, got {:?} and {:?}",
                tx.shape(),
                tk.shape()
            ));
        };
        if kc != cin {
            return dim_err(format!("conv2d kernel takes {kc} channels but input has {cin}"));
        }
        let (Some(ho), Some(wo)) = (conv_out_extent(h, kh, stride, pad), conv_out_extent(w, kw, stride, pad)) else {
            return config_err(format!(
                "conv2d kernel {kh}x{kw} (stride {stride}, pad {pad}) does not fit a {h}x{w} input"
            ));
        };
        let geom = ConvGeom { b, h, w, cin, kh, kw, cout, stride, pad, ho, wo };
        let cols = im2col(&geom, tx.data());
        let mut out = vec![0.0; geom.positions() * cout];
        gemm_nn(geom.positions(), geom.patch(), cout, &cols, tk.data(), &mut out);
        counters::add_conv((geom.positions() * geom.patch() * cout) as u64);
        let v = Tensor::new(&[b, ho, wo, cout], out)?;
        self.push("conv2d", v, Op::Conv2d { x, k, geom, cols })
    }

    /// Per-channel 2-D cross-correlation, stride 1, "same" zero padding.
    /// `k: [kh,kw,c]` with odd `kh`, `kw`.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        let (&[b, h, w, c], &[kh, kw, kc]) = (tx.shape(), tk.shape()) else {
            return dim_err(format!(
                "depthwise conv expects [b,h,w,c] input and [kh,kw,c] kernel, got {:?} and {:?}",
                tx.shape(),
                tk.shape()
            ));
        };
        if kc != c {
            return dim_err(format!("depthwise kernel has {kc} channels but input has {c}"));
        }
        if kh != kw || kh % 2 == 0 {
            return config_err(format!("depthwise kernel must be square and odd, got {kh}x{kw}"));
        }
        let pad = kh / 2;
        let (xd, kd) = (tx.data(), tk.data());
        let mut out = vec![0.0; tx.numel()];
        for bi in 0..b {
            for oy in 0..h {
                for ox in 0..w {
                    let o = ((bi * h + oy) * w + ox) * c;
                    for ky in 0..kh {
                        let Some(iy) = (oy + ky).checked_sub(pad).filter(|&v| v < h) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = (ox + kx).checked_sub(pad).filter(|&v| v < w) else { continue };
                            let i = ((bi * h + iy) * w + ix) * c;
                            let kk = (ky * kw + kx) * c;
                            let dst = &mut out[o..o + c];
                            for ch in 0..c {
                                dst[ch] += xd[i + ch] * kd[kk + ch];
                            }
                        }
                    }
                }
            }
        }
        counters::add_conv((tx.numel() * kh * kw) as u64);
        let v = Tensor::new(tx.shape(), out)?;
        self.push("depthwise_conv2d", v, Op::DepthwiseConv2d { x, k, pad })
    }
}

fn im2col(g: &ConvGeom, xd: &[f64]) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.positions() * patch];
    for bi in 0..g.b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((bi * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some(i) = g.source(bi, oy, ox, ky, kx) {
                            let o = row + (ky * g.kw + kx) * g.cin;
                            cols[o..o + g.cin].copy_from_slice(&xd[i..i + g.cin]);
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(super) fn conv2d_backward(x: Var, k: Var, geom: &ConvGeom, cols: &[f64], g: &[f64], grads: &mut Grads) {
    let (p, patch, cout) = (geom.positions(), geom.patch(), geom.cout);
    if grads.wants(k) {
        gemm_tn(patch, p, cout, cols, g, grads.slot(k));
    }
    if grads.wants(x) {
        let kd = grads.value(k).data();
        let mut dcols = vec![0.0; p * patch];
        gemm_nt(p, cout, patch, g, kd, &mut dcols);
        let dx = grads.slot(x);
        for bi in 0..geom.b {
            for oy in 0..geom.ho {
                for ox in 0..geom.wo {
                    let row = ((bi * geom.ho + oy) * geom.wo + ox) * patch;
                    for ky in 0..geom.kh {
                        for kx in 0..geom.kw {
                            if let Some(i) = geom.source(bi, oy, ox, ky, kx) {
                                let o = row + (ky * geom.kw + kx) * geom.cin;
                                for ch in 0..geom.cin {
                                    dx[i + ch] += dcols[o + ch];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn depthwise_backward(x: Var, k: Var, pad: usize, g: &[f64], grads: &mut Grads) {
    let (tx, tk) = (grads.value(x), grads.value(k));
    let &[b, h, w, c] = tx.shape() else { unreachable!() };
    let &[kh, kw, _] = tk.shape() else { unreachable!() };
    let (xd, kd) = (tx.data(), tk.data());
    let want_x = grads.wants(x);
    let want_k = grads.wants(k);
    let mut dx = vec![0.0; if want_x { xd.len() } else { 0 }];
    let mut dk = vec![0.0; if want_k { kd.len() } else { 0 }];
    for bi in 0..b {
        for oy in 0..h {
            for ox in 0..w {
                let o = ((bi * h + oy) * w + ox) * c;
                let go = &g[o..o + c];
                for ky in 0..kh {
                    let Some(iy) = (oy + ky).checked_sub(pad).filter(|&v| v < h) else { continue };
                    for kx in 0..kw {
                        let Some(ix) = (ox + kx).checked_sub(pad).filter(|&v| v < w) else { continue };
                        let i = ((bi * h + iy) * w + ix) * c;
                        let kk = (ky * kw + kx) * c;
                        if want_x {
                            for ch in 0..c {
                                dx[i + ch] += go[ch] * kd[kk + ch];
                            }
                        }
                        if want_k {
                            for ch in 0..c {
                                dk[kk + ch] += go[ch] * xd[i + ch];
                            }
                        }
                    }
                }
            }
        }
    }
    if want_x {
        grads.accumulate(x, dx);
    }
    if want_k {
        grads.accumulate(k, dk);
    }
}
