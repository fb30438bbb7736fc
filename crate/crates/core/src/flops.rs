//! Analytic multiply-accumulate and parameter accounting.
//!
//! One multiply-accumulate counts as one FLOP. Softmax, residual adds and
//! bias adds are free. Pooling reads and normalized elements are charged
//! only inside the learned reduction module (projection + norm on the
//! pooled tokens), where they are part of the "others" component.
//!
//! Two conventions are provided. [`Convention::Engine`] counts exactly what
//! the numerics engine executes (ceil-mode token counts everywhere) and is
//! what instrumentation is checked against. [`Convention::Reference`] uses
//! the closed form `2(hw)²c/(ra)²` for the similarity and aggregation term
//! and floor-mode token counts for the reduction path; it reproduces the
//! published single-layer table.

use serde::Serialize;

use crate::attention::{Pooling, Variant};
use crate::error::{config_err, Result};
use crate::isr::{Phase, ReductionSchedule};
use crate::model::{ModelConfig, DECODER_SOURCES, MASK_STRIDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    Engine,
    Reference,
}

/// MACs and learned parameters of one component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub macs: u64,
    pub params: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost { macs: self.macs + o.macs, params: self.params + o.params }
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

/// Raw work of the key/value reduction path, whether or not it is charged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ReductionWork {
    /// Key/value token count after pooling.
    pub tokens: u64,
    /// Input elements read by pooling windows (0 when the ratio is 1).
    pub pool_reads: u64,
    /// MACs of the post-pooling projection.
    pub projection_macs: u64,
    /// Elements normalized after the projection.
    pub norm_elems: u64,
}

/// Per-component cost of one attention layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub label: String,
    pub qkv_embedding: Cost,
    pub global_functioning: Cost,
    pub output_projection: Cost,
    pub others: Cost,
    pub reduction: ReductionWork,
}

impl FlopReport {
    pub fn total(&self) -> Cost {
        self.qkv_embedding + self.global_functioning + self.output_projection + self.others
    }

    fn accumulate(&mut self, o: &FlopReport) {
        self.qkv_embedding += o.qkv_embedding;
        self.global_functioning += o.global_functioning;
        self.output_projection += o.output_projection;
        self.others += o.others;
        self.reduction.tokens += o.reduction.tokens;
        self.reduction.pool_reads += o.reduction.pool_reads;
        self.reduction.projection_macs += o.reduction.projection_macs;
        self.reduction.norm_elems += o.reduction.norm_elems;
    }

    fn empty(label: &str) -> Self {
        FlopReport {
            label: label.to_string(),
            qkv_embedding: Cost::default(),
            global_functioning: Cost::default(),
            output_projection: Cost::default(),
            others: Cost::default(),
            reduction: ReductionWork::default(),
        }
    }
}

/// One attention layer on an `height × width` token grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionQuery {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub r: usize,
    pub a: usize,
    pub variant: Variant,
    pub pooling: Pooling,
    pub sr_projection: bool,
    pub bias_free: bool,
    pub convention: Convention,
}

impl AttentionQuery {
    /// Embedding-free, average pooling, no reduction module, bias-free,
    /// engine convention, `r = a = 1`.
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            r: 1,
            a: 1,
            variant: Variant::EmbeddingFree,
            pooling: Pooling::Average,
            sr_projection: false,
            bias_free: true,
            convention: Convention::Engine,
        }
    }

    /// Grid for a token count: square when `hw` is a perfect square, a
    /// single row otherwise.
    pub fn from_tokens(hw: usize, channels: usize) -> Self {
        let s = (hw as f64).sqrt().round() as usize;
        if s * s == hw {
            Self::new(s, s, channels)
        } else {
            Self::new(1, hw, channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.height, self.width, self.channels, self.r, self.a].contains(&0) {
            return config_err("attention cost arguments must all be positive");
        }
        Ok(())
    }
}

fn pooled_extent(extent: usize, r: usize, convention: Convention) -> usize {
    match convention {
        Convention::Engine => extent.div_ceil(r),
        Convention::Reference => (extent / r).max(1),
    }
}

/// Elements read along one axis by ceil-mode windows of `width` at `stride`.
fn axis_reads(extent: usize, stride: usize, width: usize) -> usize {
    (0..extent.div_ceil(stride)).map(|i| (i * stride + width).min(extent) - i * stride).sum()
}

pub fn attention_cost(q: &AttentionQuery) -> Result<FlopReport> {
    q.validate()?;
    let (h, w, c) = (q.height as u64, q.width as u64, q.channels as u64);
    let hw = h * w;
    let ra = q.r * q.a;
    let bias = if q.bias_free { 0 } else { c };
    let proj_params = c * c + bias;

    let (ph, pw) = if ra == 1 {
        (q.height, q.width)
    } else {
        (pooled_extent(q.height, ra, q.convention), pooled_extent(q.width, ra, q.convention))
    };
    let n = (ph * pw) as u64;
    let pool_reads = if ra == 1 {
        0
    } else {
        let width = if q.pooling == Pooling::Overlapped { ra + 1 } else { ra };
        (axis_reads(q.height, ra, width) * axis_reads(q.width, ra, width)) as u64 * c
    };

    let qkv_embedding = match q.variant {
        Variant::Embedded => Cost { macs: hw * c * c + 2 * n * c * c, params: 3 * proj_params },
        Variant::EmbeddingFree => Cost::default(),
    };
    let global_macs = match q.convention {
        Convention::Engine => 2 * hw * n * c,
        Convention::Reference => 2 * hw * hw * c / (ra * ra) as u64,
    };
    let reduction = ReductionWork {
        tokens: n,
        pool_reads,
        projection_macs: if q.sr_projection { n * c * c } else { 0 },
        norm_elems: if q.sr_projection { n * c } else { 0 },
    };
    let others = if q.sr_projection {
        Cost { macs: reduction.projection_macs + pool_reads + reduction.norm_elems, params: proj_params }
    } else {
        Cost::default()
    };
    let label = match q.variant {
        Variant::Embedded => "SRA",
        Variant::EmbeddingFree if q.a > 1 => "EFA w/ ISR",
        Variant::EmbeddingFree => "EFA",
    };
    Ok(FlopReport {
        label: label.to_string(),
        qkv_embedding,
        global_functioning: Cost { macs: global_macs, params: 0 },
        output_projection: Cost { macs: hw * c * c, params: proj_params },
        others,
        reduction,
    })
}

/// The three rows of the published single-layer comparison: a 14×14 grid
/// at 128 channels, training ratio 2, with the learned reduction module and
/// biased projections.
pub fn appendix_b() -> Vec<FlopReport> {
    let base = AttentionQuery {
        r: 2,
        sr_projection: true,
        bias_free: false,
        convention: Convention::Reference,
        ..AttentionQuery::new(14, 14, 128)
    };
    [AttentionQuery { variant: Variant::Embedded, ..base.clone() }, base.clone(), AttentionQuery { a: 2, ..base }]
        .iter()
        .map(|q| attention_cost(q).expect("valid preset"))
        .collect()
}

/// Cost of one encoder stage or decoder stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageCost {
    pub name: String,
    pub ratio: usize,
    pub grid: (usize, usize),
    pub attention: FlopReport,
    pub embed: Cost,
    pub ffl: Cost,
    pub norms: Cost,
}

impl StageCost {
    pub fn total(&self) -> Cost {
        self.attention.total() + self.embed + self.ffl + self.norms
    }
}

/// Whole-model cost for one image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModelCost {
    pub stages: Vec<StageCost>,
    pub head: Cost,
    /// Sum of attention components over every attention layer.
    pub attention: FlopReport,
    pub total: Cost,
}

impl ModelCost {
    /// Similarity and aggregation MACs summed over all attention layers.
    pub fn attention_macs(&self) -> u64 {
        self.attention.global_functioning.macs
    }

    /// All attention-layer MACs, projections and reduction included.
    pub fn attention_layer_macs(&self) -> u64 {
        self.attention.total().macs
    }
}

/// Analytic cost of `cfg` on an `h × w` input at the phase's ratios, using
/// the engine convention.
pub fn model_cost(
    cfg: &ModelConfig,
    schedule: &ReductionSchedule,
    phase: Phase,
    h: usize,
    w: usize,
) -> Result<ModelCost> {
    cfg.validate()?;
    cfg.check_input(h, w)?;
    let ratios = schedule.effective_ratios(phase)?;
    let c = cfg.stage_channels;
    let e = cfg.expansion as u64;
    let ln = |ch: usize| Cost { macs: 0, params: 2 * ch as u64 };
    let block = |stage: usize, gh: usize, gw: usize, r: usize| -> Result<(FlopReport, Cost, Cost)> {
        let ch = c[stage] as u64;
        let att = attention_cost(&AttentionQuery {
            r,
            variant: cfg.variant,
            pooling: cfg.pooling,
            sr_projection: cfg.sr_projection,
            bias_free: cfg.bias_free_projections,
            ..AttentionQuery::new(gh, gw, c[stage])
        })?;
        let tokens = (gh * gw) as u64;
        let hidden = e * ch;
        let ffl = Cost {
            macs: tokens * ch * hidden + tokens * hidden * 9 + tokens * hidden * ch,
            params: ch * hidden + hidden + hidden * 9 + hidden * ch + ch,
        };
        Ok((att, ffl, ln(c[stage]) + ln(c[stage])))
    };

    let mut stages = Vec::new();
    let mut cin = cfg.in_channels as u64;
    let (mut ih, mut iw) = (h, w);
    for (i, &ci) in c.iter().enumerate() {
        let (k, s, p) = if i == 0 { (7, 4, 3) } else { (3, 2, 1) };
        let (gh, gw) = ((ih + 2 * p - k) / s + 1, (iw + 2 * p - k) / s + 1);
        let cout = ci as u64;
        let kk = (k * k) as u64;
        let embed = Cost { macs: (gh * gw) as u64 * kk * cin * cout, params: kk * cin * cout + cout } + ln(ci);
        let mut sc = StageCost {
            name: format!("encoder{}", i + 1),
            ratio: ratios.encoder[i],
            grid: (gh, gw),
            attention: FlopReport::empty("attention"),
            embed,
            ffl: Cost::default(),
            norms: Cost::default(),
        };
        for _ in 0..cfg.stage_depths[i] {
            let (att, ffl, norms) = block(i, gh, gw, ratios.encoder[i])?;
            sc.attention.accumulate(&att);
            sc.ffl += ffl;
            sc.norms += norms;
        }
        stages.push(sc);
        cin = cout;
        (ih, iw) = (gh, gw);
    }
    for (j, &src) in DECODER_SOURCES.iter().enumerate() {
        let grid = stages[src].grid;
        let mut sc = StageCost {
            name: format!("decoder{}", j + 1),
            ratio: ratios.decoder[j],
            grid,
            attention: FlopReport::empty("attention"),
            embed: Cost::default(),
            ffl: Cost::default(),
            norms: ln(c[src]),
        };
        for _ in 0..cfg.decoder_depths[j] {
            let (att, ffl, norms) = block(src, grid.0, grid.1, ratios.decoder[j])?;
            sc.attention.accumulate(&att);
            sc.ffl += ffl;
            sc.norms += norms;
        }
        stages.push(sc);
    }
    let mask_tokens = ((h / MASK_STRIDE) * (w / MASK_STRIDE)) as u64;
    let concat: u64 = DECODER_SOURCES.iter().map(|&s| c[s] as u64).sum();
    let (f, k) = (cfg.fusion_channels as u64, cfg.num_classes as u64);
    let head = Cost { macs: mask_tokens * (concat * f + f * k), params: concat * f + f + f * k + k };

    let mut attention = FlopReport::empty("attention");
    let mut total = head;
    for s in &stages {
        attention.accumulate(&s.attention);
        total += s.total();
    }
    Ok(ModelCost { stages, head, attention, total })
}

/// `value / unit`, rounded half-up.
fn round_units(value: u64, unit: u64) -> u64 {
    (2 * value + unit) / (2 * unit)
}

/// Hundredths of a million, half-up.
pub fn mega_hundredths(macs: u64) -> u64 {
    round_units(macs, 10_000)
}

/// Tenths of a thousand, half-up.
pub fn kilo_tenths(params: u64) -> u64 {
    round_units(params, 100)
}

/// Relative change in tenths of a percent, rounded half away from zero.
pub fn delta_tenths(value: u64, base: u64) -> Option<i64> {
    if base == 0 {
        return None;
    }
    let num = (value as i128 - base as i128) * 1000;
    let den = base as i128;
    let mag = (2 * num.abs() + den) / (2 * den);
    Some((num.signum() * mag) as i64)
}

pub fn format_fixed(units: u64, decimals: u32) -> String {
    let scale = 10u64.pow(decimals);
    format!("{}.{:0width$}", units / scale, units % scale, width = decimals as usize)
}

pub fn format_delta(tenths: Option<i64>) -> String {
    match tenths {
        None => "-".into(),
        Some(t) => {
            let sign = if t < 0 { "-" } else { "+" };
            format!("{sign}{}.{}%", t.abs() / 10, t.abs() % 10)
        }
    }
}

/// Display values of one rendered row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RenderedRow {
    pub label: String,
    pub mflops: [String; 5],
    pub kparams: [String; 5],
    pub flops_delta: String,
    pub params_delta: String,
}

/// Rounds every component for display. Deltas are taken between the
/// displayed totals and the first row's displayed totals.
pub fn rendered_rows(reports: &[FlopReport]) -> Vec<RenderedRow> {
    let base = reports.first().map(|r| (mega_hundredths(r.total().macs), kilo_tenths(r.total().params)));
    reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let parts = [r.qkv_embedding, r.global_functioning, r.output_projection, r.others, r.total()];
            let (tm, tp) = (mega_hundredths(r.total().macs), kilo_tenths(r.total().params));
            let (fd, pd) = match (i, base) {
                (0, _) | (_, None) => (None, None),
                (_, Some((bm, bp))) => (delta_tenths(tm, bm), delta_tenths(tp, bp)),
            };
            RenderedRow {
                label: r.label.clone(),
                mflops: parts.map(|c| format_fixed(mega_hundredths(c.macs), 2)),
                kparams: parts.map(|c| format_fixed(kilo_tenths(c.params), 1)),
                flops_delta: format_delta(fd),
                params_delta: format_delta(pd),
            }
        })
        .collect()
}

/// Fixed-width table: MFLOPs columns, then parameter (K) columns.
pub fn render_table(reports: &[FlopReport]) -> String {
    let cols = ["QKV", "Global", "OutProj", "Others", "Total"];
    let row = |label: &str, m: &[String], md: &str, k: &[String], kd: &str| {
        let mut l = format!("{label:<12}");
        m.iter().for_each(|v| l += &format!(" {v:>8}"));
        l += &format!(" {md:>8} |");
        k.iter().for_each(|v| l += &format!(" {v:>8}"));
        l += &format!(" {kd:>8}");
        l
    };
    let m_heads: Vec<String> = cols.iter().map(|c| format!("{c}(M)")).collect();
    let k_heads: Vec<String> = cols.iter().map(|c| format!("{c}(K)")).collect();
    let header = row("Method", &m_heads, "dFLOPs", &k_heads, "dParams");
    let mut out = format!("{header}\n{}\n", "-".repeat(header.len()));
    for r in rendered_rows(reports) {
        out += &row(&r.label, &r.mflops, &r.flops_delta, &r.kparams, &r.params_delta);
        out.push('\n');
    }
    out
}
