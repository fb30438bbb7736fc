//! The four-stage encoder, the all-attention decoder and checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionConfig, Pooling, Variant};
use crate::blocks::{EftBlock, PatchEmbed, DEFAULT_EXPANSION};
use crate::error::{config_err, dim_err, io_at, Error, Result};
use crate::isr::{Phase, Ratios, ReductionSchedule};
use crate::numerics::serialize::{read_tensor, write_tensor, Dtype};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bound, Init, Linear, Norm, ParamStore};

/// Which encoder stage feeds each decoder stage (zero-based): the deepest
/// feature goes to the first decoder stage.
pub const DECODER_SOURCES: [usize; 3] = [3, 2, 1];

/// Total spatial downsampling of the mask relative to the input.
pub const MASK_STRIDE: usize = 8;

/// Inputs must be multiples of this extent.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "three")]
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub stage_heads: [usize; 4],
    pub decoder_depths: [usize; 3],
    pub num_classes: usize,
    pub fusion_channels: usize,
    pub expansion: usize,
    pub variant: Variant,
    pub pooling: Pooling,
    pub sr_projection: bool,
    pub bias_free_projections: bool,
    /// Training reduction ratios, `[e1,e2,e3,e4]-[d1,d2,d3]`.
    pub train_ratios: Ratios,
}

fn three() -> usize {
    3
}

impl ModelConfig {
    /// Widths 16/32/64/128, heads 1/2/4/8, two blocks per encoder stage.
    pub fn nano(num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            stage_channels: [16, 32, 64, 128],
            stage_depths: [2, 2, 2, 2],
            stage_heads: [1, 2, 4, 8],
            decoder_depths: [3, 2, 1],
            num_classes,
            fusion_channels: 128,
            expansion: DEFAULT_EXPANSION,
            variant: Variant::EmbeddingFree,
            pooling: Pooling::Average,
            sr_projection: false,
            bias_free_projections: true,
            train_ratios: crate::isr::DEFAULT_TRAIN,
        }
    }

    /// The nano layout at twice the width.
    pub fn micro(num_classes: usize) -> Self {
        Self { stage_channels: [32, 64, 128, 256], ..Self::nano(num_classes) }
    }

    pub fn by_name(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "nano" => Ok(Self::nano(num_classes)),
            "micro" => Ok(Self::micro(num_classes)),
            _ => config_err(format!("unknown model preset `{name}` (nano | micro)")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return config_err(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.in_channels == 0 || self.fusion_channels == 0 || self.expansion == 0 {
            return config_err("input channels, fusion channels and expansion must be positive");
        }
        for i in 0..4 {
            self.attention(i, self.train_ratios.encoder[i]).validate()?;
        }
        self.train_ratios.validate()
    }

    /// Attention configuration for encoder stage `stage` (zero-based).
    pub fn attention(&self, stage: usize, ratio: usize) -> AttentionConfig {
        AttentionConfig {
            channels: self.stage_channels[stage],
            heads: self.stage_heads[stage],
            train_ratio: ratio,
            variant: self.variant,
            pooling: self.pooling,
            sr_projection: self.sr_projection,
            bias_free_projections: self.bias_free_projections,
        }
    }

    pub fn schedule(&self) -> ReductionSchedule {
        ReductionSchedule { train: self.train_ratios, multipliers: Ratios::ONES }
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h < INPUT_MULTIPLE
            || w < INPUT_MULTIPLE
            || !h.is_multiple_of(INPUT_MULTIPLE)
            || !w.is_multiple_of(INPUT_MULTIPLE)
        {
            return config_err(format!(
                "input {h}x{w} must be a positive multiple of {INPUT_MULTIPLE} in both extents"
            ));
        }
        Ok(())
    }

    /// Spatial extents of encoder stage `stage` for an `h×w` input.
    pub fn stage_extent(&self, stage: usize, h: usize, w: usize) -> (usize, usize) {
        let f = 4 << stage;
        (h / f, w / f)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub embed: PatchEmbed,
    pub blocks: Vec<EftBlock>,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub norm: Norm,
    pub blocks: Vec<EftBlock>,
}

/// Outputs of one forward pass.
pub struct Trace {
    /// Encoder features `F_1..F_4`.
    pub encoder: [Var; 4],
    /// Upsampled decoder features, deepest first.
    pub decoder: [Var; 3],
    /// Mask at one eighth of the input resolution.
    pub mask: Var,
    /// Mask upsampled to the input resolution.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct EdaFormer {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Vec<EncoderStage>,
    pub decoder: Vec<DecoderStage>,
    pub fuse: Linear,
    pub classify: Linear,
}

impl EdaFormer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let mut store = ParamStore::new();
        let c = config.stage_channels;
        let mut encoder = Vec::with_capacity(4);
        for i in 0..4 {
            let cin = if i == 0 { config.in_channels } else { c[i - 1] };
            let embed = PatchEmbed::for_stage(&mut store, &mut init, &format!("enc{i}.embed"), i == 0, cin, c[i])?;
            let blocks = (0..config.stage_depths[i])
                .map(|k| {
                    let acfg = config.attention(i, config.train_ratios.encoder[i]);
                    EftBlock::new(&mut store, &mut init, &format!("enc{i}.block{k}"), acfg, config.expansion)
                })
                .collect::<Result<_>>()?;
            encoder.push(EncoderStage { embed, blocks });
        }
        let mut decoder = Vec::with_capacity(3);
        for (j, &src) in DECODER_SOURCES.iter().enumerate() {
            let norm = Norm::new(&mut store, &format!("dec{j}.norm"), c[src])?;
            let blocks = (0..config.decoder_depths[j])
                .map(|k| {
                    let acfg = config.attention(src, config.train_ratios.decoder[j]);
                    EftBlock::new(&mut store, &mut init, &format!("dec{j}.block{k}"), acfg, config.expansion)
                })
                .collect::<Result<_>>()?;
            decoder.push(DecoderStage { norm, blocks });
        }
        let concat: usize = DECODER_SOURCES.iter().map(|&s| c[s]).sum();
        let fuse = Linear::new(&mut store, &mut init, "head.fuse", concat, config.fusion_channels, true)?;
        let classify =
            Linear::new(&mut store, &mut init, "head.classify", config.fusion_channels, config.num_classes, true)?;
        Ok(Self { config, params: store, encoder, decoder, fuse, classify })
    }

    /// Builds the architecture and loads every parameter from `ck`.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(ck.config.clone(), 0)?;
        let mut seen = 0;
        for (name, t) in &ck.tensors {
            if name.starts_with(OPTIM_PREFIX) {
                continue;
            }
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::Format(format!("checkpoint tensor `{name}` does not belong to this model")))?;
            model.params.set(id, t.clone()).map_err(|e| Error::Format(e.to_string()))?;
            seen += 1;
        }
        if seen != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {seen} model tensors, the configuration needs {}",
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            tensors: self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            step,
            seed,
        }
    }

    /// The same weights with new training ratios, for fine-tuning at a
    /// raised reduction. Parameter shapes do not depend on the ratios.
    pub fn with_train_ratios(mut self, ratios: Ratios) -> Result<Self> {
        ratios.validate()?;
        self.config.train_ratios = ratios;
        for (i, stage) in self.encoder.iter_mut().enumerate() {
            stage.blocks.iter_mut().for_each(|b| b.attn_cfg.train_ratio = ratios.encoder[i]);
        }
        for (j, stage) in self.decoder.iter_mut().enumerate() {
            stage.blocks.iter_mut().for_each(|b| b.attn_cfg.train_ratio = ratios.decoder[j]);
        }
        Ok(self)
    }

    /// Number of learned scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn encoder_forward(&self, g: &mut Graph, p: &Bound, img: Var, r_e: [usize; 4]) -> Result<[Var; 4]> {
        let s = g.shape(img).to_vec();
        if s.len() != 4 || s[3] != self.config.in_channels {
            return dim_err(format!("image must be [b, h, w, {}], got {s:?}", self.config.in_channels));
        }
        self.config.check_input(s[1], s[2])?;
        let mut x = img;
        let mut feats = [img; 4];
        for (i, stage) in self.encoder.iter().enumerate() {
            x = stage.embed.forward(g, p, x)?;
            for blk in &stage.blocks {
                x = blk.forward(g, p, x, r_e[i])?;
            }
            feats[i] = x;
        }
        Ok(feats)
    }

    /// Decodes `F_2, F_3, F_4` into the class mask; returns the mask and the
    /// upsampled per-stage features.
    pub fn decoder_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        feats: [Var; 3],
        r_d: [usize; 3],
    ) -> Result<(Var, [Var; 3])> {
        let [f2, f3, f4] = feats;
        let c = self.config.stage_channels;
        let s2 = g.shape(f2).to_vec();
        let (b, th, tw) = (s2[0], s2[1], s2[2]);
        let inputs = [f4, f3, f2];
        let mut ups = [f2; 3];
        for (j, stage) in self.decoder.iter().enumerate() {
            let f = inputs[j];
            let s = g.shape(f).to_vec();
            let src = DECODER_SOURCES[j];
            let expect = [b, th >> (src - 1), tw >> (src - 1), c[src]];
            if s != expect {
                return dim_err(format!("decoder stage {} expects feature {expect:?}, got {s:?}", j + 1));
            }
            let mut y = stage.norm.forward(g, p, f)?;
            for blk in &stage.blocks {
                y = blk.forward(g, p, y, r_d[j])?;
            }
            let y = g.add(y, f)?;
            ups[j] = if s[1] == th && s[2] == tw { y } else { g.bilinear_upsample(y, th, tw)? };
        }
        let fused = g.concat_lastdim(&ups)?;
        let hidden = self.fuse.forward(g, p, fused)?;
        let hidden = g.gelu(hidden)?;
        let mask = self.classify.forward(g, p, hidden)?;
        Ok((mask, ups))
    }

    pub fn trace(&self, g: &mut Graph, p: &Bound, img: Var, ratios: Ratios) -> Result<Trace> {
        let enc = self.encoder_forward(g, p, img, ratios.encoder)?;
        let (mask, dec) = self.decoder_forward(g, p, [enc[1], enc[2], enc[3]], ratios.decoder)?;
        let s = g.shape(img).to_vec();
        let logits = g.bilinear_upsample(mask, s[1], s[2])?;
        Ok(Trace { encoder: enc, decoder: dec, mask, logits })
    }

    /// Per-pixel logits `[b, H, W, classes]`.
    pub fn model_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        img: Var,
        schedule: &ReductionSchedule,
        phase: Phase,
    ) -> Result<Var> {
        Ok(self.trace(g, p, img, schedule.effective_ratios(phase)?)?.logits)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, img: &Tensor, schedule: &ReductionSchedule, phase: Phase) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(img.clone());
        let out = self.model_forward(&mut g, &p, x, schedule, phase)?;
        Ok(g.value(out).clone())
    }
}

const CKPT_MAGIC: &[u8; 8] = b"EFCKPT01";

/// Tensors whose names start with this prefix hold optimizer state.
pub const OPTIM_PREFIX: &str = "optim.";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: u64,
    seed: u64,
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    offset: u64,
    bytes: u64,
}

/// Model configuration, named tensors and training position.
///
/// Layout: 8-byte magic, u64 little-endian header length, a TOML header
/// (step, seed, configuration, manifest of name → byte offset), then the
/// tensor records back to back in the EFT1 format at f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
    pub step: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut manifest = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = blob.len() as u64;
            write_tensor(&mut blob, t, Dtype::F64)?;
            manifest.push(ManifestEntry { name: name.clone(), offset, bytes: blob.len() as u64 - offset });
        }
        let header = Header { step: self.step, seed: self.seed, config: self.config.clone(), manifest };
        let text = toml::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + text.len() + blob.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let text = std::str::from_utf8(body).map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        header.config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let blob = &bytes[16 + len..];
        let mut tensors = Vec::with_capacity(header.manifest.len());
        for e in header.manifest {
            let (start, end) = (e.offset as usize, (e.offset + e.bytes) as usize);
            let mut rec = blob
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("tensor `{}` lies outside the file", e.name)))?;
            let t = read_tensor(&mut rec)?;
            tensors.push((e.name, t));
        }
        Ok(Self { config: header.config, tensors, step: header.step, seed: header.seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::File::create(path).and_then(|mut f| f.write_all(&bytes)).map_err(io_at(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_at(path))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_bytes()?)))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
