//! Embedding-free attention, the embedded spatial-reduction baseline, and the
//! key/value reducers they share.
//!
//! Both operators take a channel-last feature map `[b, h, w, c]`, reduce it
//! spatially by the effective ratio to obtain keys and values, and return a
//! map of the input's shape. The embedding-free operator uses the input as
//! queries and the reduced map as keys and values directly; only the output
//! projection is learned.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::{Graph, Var};
use crate::params::{plain_norm, Bound, Init, Linear, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    EmbeddingFree,
    Embedded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Average,
    Max,
    Overlapped,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding_free" | "embedding-free" => Ok(Self::EmbeddingFree),
            "embedded" => Ok(Self::Embedded),
            _ => config_err(format!("unknown attention variant `{s}` (embedding-free | embedded)")),
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "max" => Ok(Self::Max),
            "overlapped" => Ok(Self::Overlapped),
            _ => config_err(format!("unknown pooling `{s}` (average | max | overlapped)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    pub train_ratio: usize,
    pub variant: Variant,
    pub pooling: Pooling,
    /// Learned `c → c` projection followed by a parameter-free layer norm
    /// on the pooled tokens.
    pub sr_projection: bool,
    pub bias_free_projections: bool,
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize) -> Self {
        Self {
            channels,
            heads,
            train_ratio: 1,
            variant: Variant::EmbeddingFree,
            pooling: Pooling::Average,
            sr_projection: false,
            bias_free_projections: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 {
            return config_err("attention channels and heads must be positive");
        }
        if !self.channels.is_multiple_of(self.heads) {
            return config_err(format!("{} channels do not split into {} heads", self.channels, self.heads));
        }
        if self.train_ratio == 0 {
            return config_err("reduction ratio must be at least 1");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Learned tensors of one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub query: Option<Linear>,
    pub key: Option<Linear>,
    pub value: Option<Linear>,
    pub output: Linear,
    pub sr: Option<Linear>,
}

impl AttentionWeights {
    pub fn new<R: Rng>(store: &mut ParamStore, init: &mut Init<R>, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let bias = !cfg.bias_free_projections;
        let proj = |store: &mut ParamStore, init: &mut Init<R>, part: &str| {
            Linear::new(store, init, &format!("{name}.{part}"), c, c, bias)
        };
        let (query, key, value) = match cfg.variant {
            Variant::Embedded => {
                (Some(proj(store, init, "query")?), Some(proj(store, init, "key")?), Some(proj(store, init, "value")?))
            }
            Variant::EmbeddingFree => (None, None, None),
        };
        let output = proj(store, init, "output")?;
        let sr = if cfg.sr_projection { Some(proj(store, init, "sr")?) } else { None };
        Ok(Self { query, key, value, output, sr })
    }

    pub fn num_params(&self) -> usize {
        [&self.query, &self.key, &self.value, &self.sr].into_iter().flatten().map(Linear::num_params).sum::<usize>()
            + self.output.num_params()
    }
}

/// Pools `x` by `r` and optionally projects and normalizes the pooled
/// tokens. A ratio of 1 skips pooling.
pub fn spatial_reduce(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    r: usize,
    pooling: Pooling,
    sr: Option<&Linear>,
) -> Result<Var> {
    if r == 0 {
        return config_err("reduction ratio must be at least 1");
    }
    let pooled = match (r, pooling) {
        (1, _) => x,
        (_, Pooling::Average) => g.avg_pool2d(x, r)?,
        (_, Pooling::Max) => g.max_pool2d(x, r)?,
        (_, Pooling::Overlapped) => g.overlapped_avg_pool2d(x, r)?,
    };
    match sr {
        Some(lin) => {
            let y = lin.forward(g, p, pooled)?;
            plain_norm(g, y)
        }
        None => Ok(pooled),
    }
}

/// Embedding-free attention: queries are `x`, keys and values are the
/// reduced map. Returns a tensor of the input's shape.
pub fn efa_forward(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
    r_effective: usize,
) -> Result<Var> {
    Ok(attend(g, p, x, cfg, w, r_effective, false)?.0)
}

/// Spatial-reduction attention with learned query, key and value
/// projections.
pub fn embedded_sra_forward(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
    r_effective: usize,
) -> Result<Var> {
    Ok(attend(g, p, x, cfg, w, r_effective, true)?.0)
}

/// Dispatches on `cfg.variant`.
pub fn attention_forward(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
    r_effective: usize,
) -> Result<Var> {
    Ok(attend(g, p, x, cfg, w, r_effective, cfg.variant == Variant::Embedded)?.0)
}

/// Post-softmax attention weights `[b, heads, h·w, h'·w']`.
pub fn attention_map(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
    r_effective: usize,
) -> Result<Var> {
    Ok(attend(g, p, x, cfg, w, r_effective, cfg.variant == Variant::Embedded)?.1)
}

fn attend(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
    r: usize,
    embedded: bool,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[3] != cfg.channels {
        return crate::error::dim_err(format!("attention expects [b, h, w, {}], got {shape:?}", cfg.channels));
    }
    let (b, h, wd, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (heads, d) = (cfg.heads, cfg.head_dim());
    let reduced = spatial_reduce(g, p, x, r, cfg.pooling, w.sr.as_ref())?;
    let rs = g.shape(reduced).to_vec();
    let n = rs[1] * rs[2];

    let tokens = g.reshape(x, &[b, h * wd, c])?;
    let kv = g.reshape(reduced, &[b, n, c])?;
    let (q, k, v) = if embedded {
        let missing = || Error::Config("embedded attention needs query/key/value projections".into());
        let q = w.query.as_ref().ok_or_else(missing)?.forward(g, p, tokens)?;
        let k = w.key.as_ref().ok_or_else(missing)?.forward(g, p, kv)?;
        let v = w.value.as_ref().ok_or_else(missing)?.forward(g, p, kv)?;
        (q, k, v)
    } else {
        (tokens, kv, kv)
    };

    let q = g.reshape(q, &[b, h * wd, heads, d])?;
    let q = g.permute(q, &[0, 2, 1, 3])?;
    let k = g.reshape(k, &[b, n, heads, d])?;
    let kt = g.permute(k, &[0, 2, 3, 1])?;
    let v = g.reshape(v, &[b, n, heads, d])?;
    let v = g.permute(v, &[0, 2, 1, 3])?;

    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let att = g.softmax_lastdim(scores)?;
    let mixed = g.matmul(att, v)?;
    let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = g.reshape(mixed, &[b, h, wd, c])?;
    let out = w.output.forward(g, p, mixed)?;
    Ok((out, att))
}

/// Builds a standalone layer in a fresh store, for tests and examples.
pub fn standalone<R: Rng>(cfg: &AttentionConfig, rng: &mut R) -> Result<(ParamStore, AttentionWeights)> {
    let mut store = ParamStore::new();
    let w = AttentionWeights::new(&mut store, &mut Init::new(rng), "attn", cfg)?;
    Ok((store, w))
}
