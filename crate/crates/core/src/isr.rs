//! Reduction-ratio schedules and inference-time spatial reduction.
//!
//! A schedule pairs training ratios `t` with inference multipliers `a` for
//! the four encoder stages and three decoder stages. The effective ratio at
//! inference is `t·a`; during training it is `t`. Raising `a` shrinks the
//! key/value token count without touching any weight, because attention
//! output shape does not depend on the key count.
//!
//! Schedules are written `[r1,r2,r3,r4]-[d1,d2,d3]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{config_err, Error, Result};

/// Per-stage ratios: four encoder stages, three decoder stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ratios {
    pub encoder: [usize; 4],
    pub decoder: [usize; 3],
}

impl Ratios {
    pub const ONES: Ratios = Ratios { encoder: [1; 4], decoder: [1; 3] };

    pub fn new(encoder: [usize; 4], decoder: [usize; 3]) -> Result<Self> {
        let r = Self { encoder, decoder };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iter().any(|v| v == 0) {
            return config_err(format!("ratios must be positive integers, got {self}"));
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.encoder.iter().chain(&self.decoder).copied()
    }

    fn zip_with(&self, other: &Ratios, f: impl Fn(usize, usize) -> usize) -> Ratios {
        Ratios {
            encoder: std::array::from_fn(|i| f(self.encoder[i], other.encoder[i])),
            decoder: std::array::from_fn(|i| f(self.decoder[i], other.decoder[i])),
        }
    }
}

impl fmt::Display for Ratios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        write!(f, "[{}]-[{}]", join(&self.encoder), join(&self.decoder))
    }
}

impl FromStr for Ratios {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Parser { src: s.as_bytes(), pos: 0 }.ratios()
    }
}

impl Serialize for Ratios {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ratios {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse { pos: self.pos, msg: msg.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn expect(&mut self, ch: u8) -> Result<()> {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&ch) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected `{}`", ch as char))
        }
    }

    fn int(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return self.err("expected a positive integer");
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
        match text.parse::<usize>() {
            Ok(0) => {
                self.pos = start;
                self.err("ratios must be at least 1")
            }
            Ok(v) => Ok(v),
            Err(_) => {
                self.pos = start;
                self.err("integer out of range")
            }
        }
    }

    fn list<const N: usize>(&mut self, what: &str) -> Result<[usize; N]> {
        self.expect(b'[')?;
        let mut out = [0; N];
        for (i, slot) in out.iter_mut().enumerate() {
            if i > 0 {
                self.skip_ws();
                if self.src.get(self.pos) == Some(&b']') {
                    return self.err(format!("{what} list needs {N} entries, found {i}"));
                }
                self.expect(b',')?;
            }
            *slot = self.int()?;
        }
        self.skip_ws();
        if self.src.get(self.pos) == Some(&b',') {
            return self.err(format!("{what} list needs exactly {N} entries"));
        }
        self.expect(b']')?;
        Ok(out)
    }

    fn ratios(&mut self) -> Result<Ratios> {
        let encoder = self.list::<4>("encoder")?;
        self.expect(b'-')?;
        let decoder = self.list::<3>("decoder")?;
        self.skip_ws();
        if self.pos != self.src.len() {
            return self.err("unexpected trailing input");
        }
        Ok(Ratios { encoder, decoder })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Inference,
}

/// Training ratios plus inference multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionSchedule {
    #[serde(default = "default_train")]
    pub train: Ratios,
    #[serde(default = "ones")]
    pub multipliers: Ratios,
}

fn default_train() -> Ratios {
    DEFAULT_TRAIN
}

fn ones() -> Ratios {
    Ratios::ONES
}

impl Default for ReductionSchedule {
    fn default() -> Self {
        Self { train: DEFAULT_TRAIN, multipliers: Ratios::ONES }
    }
}

/// Training ratios `[8,4,2,1]-[1,2,4]`.
pub const DEFAULT_TRAIN: Ratios = Ratios { encoder: [8, 4, 2, 1], decoder: [1, 2, 4] };

/// The best inference schedule for [`DEFAULT_TRAIN`]: `[16,8,2,1]-[2,4,8]`.
pub const OPTIMAL_INFERENCE: Ratios = Ratios { encoder: [16, 8, 2, 1], decoder: [2, 4, 8] };

impl ReductionSchedule {
    pub fn new(train: Ratios, multipliers: Ratios) -> Result<Self> {
        train.validate()?;
        multipliers.validate()?;
        Ok(Self { train, multipliers })
    }

    pub fn training(train: Ratios) -> Result<Self> {
        Self::new(train, Ratios::ONES)
    }

    /// Factorizes target effective ratios against these training ratios.
    /// Every target must be a positive multiple of its training ratio.
    pub fn with_target(&self, target: Ratios) -> Result<Self> {
        target.validate()?;
        for (t, r) in self.train.iter().zip(target.iter()) {
            if r < t || r % t != 0 {
                return config_err(format!(
                    "target {target} is not an integer multiple (a >= 1) of training ratios {}",
                    self.train
                ));
            }
        }
        Self::new(self.train, target.zip_with(&self.train, |r, t| r / t))
    }

    pub fn effective_ratios(&self, phase: Phase) -> Result<Ratios> {
        self.train.validate()?;
        self.multipliers.validate()?;
        Ok(match phase {
            Phase::Train => self.train,
            Phase::Inference => self.train.zip_with(&self.multipliers, |t, a| t * a),
        })
    }

    pub fn is_identity(&self) -> bool {
        self.multipliers == Ratios::ONES
    }
}

/// Effective ratios `(r_E, r_D)` for a phase.
pub fn effective_ratios(s: &ReductionSchedule, phase: Phase) -> Result<([usize; 4], [usize; 3])> {
    let r = s.effective_ratios(phase)?;
    Ok((r.encoder, r.decoder))
}

/// Parses `[i,i,i,i]-[i,i,i]` into a training schedule with unit
/// multipliers.
pub fn parse_schedule(text: &str) -> Result<ReductionSchedule> {
    ReductionSchedule::training(text.parse()?)
}

/// Formats the effective ratios of `s` for `phase`.
pub fn format_schedule(s: &ReductionSchedule, phase: Phase) -> Result<String> {
    Ok(s.effective_ratios(phase)?.to_string())
}

/// Parses one schedule per non-empty line; `#` starts a comment.
pub fn parse_schedule_list(text: &str) -> Result<Vec<Ratios>> {
    text.lines().map(|l| l.split('#').next().unwrap_or("").trim()).filter(|l| !l.is_empty()).map(str::parse).collect()
}

/// The twenty inference schedules compared against the default training
/// ratios: five encoder settings crossed with four decoder settings.
pub fn appendix_c_schedules() -> Vec<Ratios> {
    let enc = [[8, 4, 2, 1], [16, 4, 2, 1], [16, 8, 2, 1], [16, 8, 4, 1], [16, 8, 4, 2]];
    let dec = [[1, 2, 4], [1, 2, 8], [1, 4, 8], [2, 4, 8]];
    enc.iter().flat_map(|&e| dec.iter().map(move |&d| Ratios { encoder: e, decoder: d })).collect()
}

/// Decoder-only sweeps used for the ratio-robustness comparison: decoder
/// multipliers 1 to 4 on the default training ratios.
pub fn robustness_schedules() -> Vec<Ratios> {
    [[1, 2, 4], [2, 4, 8], [3, 6, 12], [4, 8, 16]]
        .into_iter()
        .map(|d| Ratios { encoder: [8, 4, 2, 1], decoder: d })
        .collect()
}

/// One evaluated schedule.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub schedule: String,
    /// Similarity and aggregation MACs over all attention layers.
    pub attention_macs: u64,
    /// All attention-layer MACs, projections included.
    pub attention_layer_macs: u64,
    pub model_macs: u64,
    pub pixel_accuracy: f64,
    pub miou: f64,
    /// Change in mIoU against the baseline.
    pub miou_delta: f64,
    /// Relative change of `attention_macs` against the baseline.
    pub attention_macs_delta: f64,
}

/// Baseline (training ratios) plus one row per requested schedule, in
/// request order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub baseline: SweepRow,
    pub rows: Vec<SweepRow>,
}

/// Evaluates `model` at each target schedule without modifying it.
pub fn sweep(
    model: &crate::model::EdaFormer,
    schedules: &[Ratios],
    data: &[crate::harness::SyntheticScene],
) -> Result<SweepReport> {
    let first = data.first().ok_or_else(|| Error::Usage("sweep needs at least one scene".into()))?;
    let (h, w) = (first.height(), first.width());
    let train = model.config.schedule();
    let row = |s: &ReductionSchedule, phase: Phase, base: Option<&SweepRow>| -> Result<SweepRow> {
        let cost = crate::flops::model_cost(&model.config, s, phase, h, w)?;
        let m = crate::harness::evaluate(model, data, s, phase)?;
        let attention_macs = cost.attention_macs();
        let (miou_delta, attention_macs_delta) = match base {
            Some(b) => (m.miou - b.miou, attention_macs as f64 / b.attention_macs.max(1) as f64 - 1.0),
            None => (0.0, 0.0),
        };
        Ok(SweepRow {
            schedule: s.effective_ratios(phase)?.to_string(),
            attention_macs,
            attention_layer_macs: cost.attention_layer_macs(),
            model_macs: cost.total.macs,
            pixel_accuracy: m.pixel_accuracy,
            miou: m.miou,
            miou_delta,
            attention_macs_delta,
        })
    };
    let baseline = row(&train, Phase::Train, None)?;
    let rows = schedules
        .iter()
        .map(|&target| row(&train.with_target(target)?, Phase::Inference, Some(&baseline)))
        .collect::<Result<_>>()?;
    Ok(SweepReport { baseline, rows })
}

/// Fixed-width rendering of a sweep, baseline first.
pub fn render_sweep(report: &SweepReport) -> String {
    let header = format!(
        "{:<22} {:>12} {:>9} {:>14} {:>12} {:>8} {:>8} {:>8}",
        "Schedule", "Attn MACs", "dAttn", "Attn layer", "Model MACs", "Acc", "mIoU", "dmIoU"
    );
    let mut out = format!("{header}\n{}\n", "-".repeat(header.len()));
    let mut line = |r: &SweepRow, base: bool| {
        let (da, dm) = if base {
            ("-".to_string(), "-".to_string())
        } else {
            (format!("{:+.1}%", 100.0 * r.attention_macs_delta), format!("{:+.4}", r.miou_delta))
        };
        out += &format!(
            "{:<22} {:>12} {:>9} {:>14} {:>12} {:>8.4} {:>8.4} {:>8}\n",
            r.schedule, r.attention_macs, da, r.attention_layer_macs, r.model_macs, r.pixel_accuracy, r.miou, dm
        );
    };
    line(&report.baseline, true);
    for r in &report.rows {
        line(r, false);
    }
    out
}
