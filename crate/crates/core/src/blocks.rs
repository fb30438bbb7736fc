//! Patch embedding, the feed-forward layer and the pre-norm transformer block.

use rand::Rng;

use crate::attention::{attention_forward, AttentionConfig, AttentionWeights};
use crate::error::{config_err, dim_err, Result};
use crate::numerics::{conv_out_extent, Graph, Tensor, Var};
use crate::params::{Bound, Init, Linear, Norm, ParamId, ParamStore};

/// Default hidden expansion of the feed-forward layer.
pub const DEFAULT_EXPANSION: usize = 4;

/// `linear → depthwise 3×3 → GELU → linear`, applied on the spatial grid.
#[derive(Clone, Debug)]
pub struct Ffl {
    pub fc1: Linear,
    pub dw: ParamId,
    pub fc2: Linear,
    pub channels: usize,
    pub expansion: usize,
}

impl Ffl {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<R>,
        name: &str,
        channels: usize,
        expansion: usize,
    ) -> Result<Self> {
        if channels == 0 || expansion == 0 {
            return config_err("feed-forward channels and expansion must be positive");
        }
        let hidden = channels * expansion;
        let fc1 = Linear::new(store, init, &format!("{name}.fc1"), channels, hidden, true)?;
        let dw = store.add(format!("{name}.dw"), init.normal(&[3, 3, hidden], (2.0f64 / 9.0).sqrt()))?;
        let fc2 = Linear::new(store, init, &format!("{name}.fc2"), hidden, channels, true)?;
        Ok(Self { fc1, dw, fc2, channels, expansion })
    }

    pub fn hidden(&self) -> usize {
        self.channels * self.expansion
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        expect_channels(g, x, self.channels, "feed-forward layer")?;
        let y = self.fc1.forward(g, p, x)?;
        let y = g.depthwise_conv2d(y, p.var(self.dw))?;
        let y = g.gelu(y)?;
        self.fc2.forward(g, p, y)
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + 9 * self.hidden() + self.fc2.num_params()
    }
}

/// Transformer block: `z = Attn(LN(x)) + x`, `out = FFL(LN(z)) + z`.
#[derive(Clone, Debug)]
pub struct EftBlock {
    pub norm1: Norm,
    pub attn_cfg: AttentionConfig,
    pub attn: AttentionWeights,
    pub norm2: Norm,
    pub ffl: Ffl,
}

impl EftBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<R>,
        name: &str,
        attn_cfg: AttentionConfig,
        expansion: usize,
    ) -> Result<Self> {
        let c = attn_cfg.channels;
        let norm1 = Norm::new(store, &format!("{name}.norm1"), c)?;
        let attn = AttentionWeights::new(store, init, &format!("{name}.attn"), &attn_cfg)?;
        let norm2 = Norm::new(store, &format!("{name}.norm2"), c)?;
        let ffl = Ffl::new(store, init, &format!("{name}.ffl"), c, expansion)?;
        Ok(Self { norm1, attn_cfg, attn, norm2, ffl })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, r_effective: usize) -> Result<Var> {
        let n = self.norm1.forward(g, p, x)?;
        let a = attention_forward(g, p, n, &self.attn_cfg, &self.attn, r_effective)?;
        let z = g.add(a, x)?;
        let n = self.norm2.forward(g, p, z)?;
        let f = self.ffl.forward(g, p, n)?;
        g.add(f, z)
    }

    pub fn num_params(&self) -> usize {
        self.norm1.num_params() + self.attn.num_params() + self.norm2.num_params() + self.ffl.num_params()
    }
}

/// Strided convolution followed by layer norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub norm: Norm,
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl PatchEmbed {
    /// Kernel 7 / stride 4 / pad 3 for the first stage, 3 / 2 / 1 after.
    pub fn for_stage<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<R>,
        name: &str,
        first: bool,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let (size, stride, pad) = if first { (7, 4, 3) } else { (3, 2, 1) };
        Self::new(store, init, name, size, stride, pad, in_channels, out_channels)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<R>,
        name: &str,
        size: usize,
        stride: usize,
        pad: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        if size == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
            return config_err("patch embedding extents must be positive");
        }
        let std = (2.0 / (size * size * out_channels) as f64).sqrt();
        let kernel = store.add(format!("{name}.kernel"), init.normal(&[size, size, in_channels, out_channels], std))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        let norm = Norm::new(store, &format!("{name}.norm"), out_channels)?;
        Ok(Self { kernel, bias, norm, size, stride, pad, in_channels, out_channels })
    }

    pub fn output_extent(&self, input: usize) -> Option<usize> {
        conv_out_extent(input, self.size, self.stride, self.pad)
    }

    /// Convolution output before normalization.
    pub fn project(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[3] != self.in_channels {
            return dim_err(format!("patch embedding expects [b, h, w, {}], got {s:?}", self.in_channels));
        }
        if s[1] + 2 * self.pad < self.size || s[2] + 2 * self.pad < self.size {
            return config_err(format!(
                "input {}x{} is smaller than the {}x{} patch kernel",
                s[1], s[2], self.size, self.size
            ));
        }
        let y = g.conv2d(x, p.var(self.kernel), self.stride, self.pad)?;
        g.add(y, p.var(self.bias))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = self.project(g, p, x)?;
        self.norm.forward(g, p, y)
    }

    pub fn num_params(&self) -> usize {
        self.size * self.size * self.in_channels * self.out_channels + self.out_channels + self.norm.num_params()
    }
}

fn expect_channels(g: &Graph, x: Var, c: usize, what: &str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 4 || s[3] != c {
        return dim_err(format!("{what} expects [b, h, w, {c}], got {s:?}"));
    }
    Ok(())
}
