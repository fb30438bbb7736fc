use serde::Serialize;

use crate::attention::Variant;
use crate::error::{Error, Result};
use crate::harness::data::{collate, SyntheticScene};
use crate::harness::eval::{evaluate, Metrics};
use crate::isr::{sweep, Phase, Ratios, SweepReport};
use crate::model::EdaFormer;
use crate::numerics::Graph;

/// Train-low/infer-high against train-high/infer-high.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioTransfer {
    pub target: String,
    /// Model trained at its own ratios, evaluated at `target`.
    pub low_to_high: Metrics,
    /// Model trained at `target`, evaluated at `target`.
    pub high_to_high: Metrics,
}

impl RatioTransfer {
    pub fn miou_advantage(&self) -> f64 {
        self.low_to_high.miou - self.high_to_high.miou
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Warn,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IsrReport {
    pub transfer: Option<RatioTransfer>,
    /// Robustness sweep for the embedding-free model.
    pub embedding_free: SweepReport,
    /// The same sweep for an embedded-variant model, when supplied.
    pub embedded: Option<SweepReport>,
    /// Embedding-free degradation at the last schedule is no worse than the
    /// embedded one.
    pub robustness_verdict: Option<Verdict>,
    /// Mean cosine similarity of fused decoder features between the
    /// training ratios and every ratio doubled.
    pub feature_similarity: f64,
}

/// Inputs for [`isr_experiments`].
pub struct IsrInputs<'a> {
    pub base: &'a EdaFormer,
    /// Same architecture trained at `target` ratios.
    pub high: Option<&'a EdaFormer>,
    /// Same architecture with learned query/key/value projections.
    pub embedded: Option<&'a EdaFormer>,
    pub target: Ratios,
    pub schedules: Vec<Ratios>,
    pub data: &'a [SyntheticScene],
}

fn same_except(a: &EdaFormer, b: &EdaFormer, what: &str, relax: impl Fn(&mut crate::model::ModelConfig)) -> Result<()> {
    let (mut ca, mut cb) = (a.config.clone(), b.config.clone());
    relax(&mut ca);
    relax(&mut cb);
    if ca != cb {
        return Err(Error::Usage(format!("{what} model does not match the base configuration")));
    }
    Ok(())
}

pub fn isr_experiments(inp: &IsrInputs) -> Result<IsrReport> {
    let transfer = match inp.high {
        Some(high) => {
            same_except(inp.base, high, "raised-ratio", |c| c.train_ratios = Ratios::ONES)?;
            if high.config.train_ratios != inp.target {
                return Err(Error::Usage(format!(
                    "raised-ratio model was trained at {}, expected {}",
                    high.config.train_ratios, inp.target
                )));
            }
            let low = inp.base.config.schedule().with_target(inp.target)?;
            Some(RatioTransfer {
                target: inp.target.to_string(),
                low_to_high: evaluate(inp.base, inp.data, &low, Phase::Inference)?,
                high_to_high: evaluate(high, inp.data, &high.config.schedule(), Phase::Train)?,
            })
        }
        None => None,
    };
    let embedding_free = sweep(inp.base, &inp.schedules, inp.data)?;
    let embedded = match inp.embedded {
        Some(m) => {
            same_except(inp.base, m, "embedded", |c| c.variant = Variant::Embedded)?;
            Some(sweep(m, &inp.schedules, inp.data)?)
        }
        None => None,
    };
    let robustness_verdict = match (&embedded, embedding_free.rows.last()) {
        (Some(e), Some(ef_last)) => {
            e.rows.last().map(
                |e_last| {
                    if ef_last.miou_delta >= e_last.miou_delta {
                        Verdict::Pass
                    } else {
                        Verdict::Warn
                    }
                },
            )
        }
        _ => None,
    };
    let feature_similarity = feature_similarity(inp.base, inp.data, 2)?;
    Ok(IsrReport { transfer, embedding_free, embedded, robustness_verdict, feature_similarity })
}

/// Mean per-pixel cosine similarity of the fused decoder features at the
/// training ratios versus every ratio multiplied by `a`.
pub fn feature_similarity(model: &EdaFormer, data: &[SyntheticScene], a: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("feature comparison needs at least one scene".into()));
    }
    let base = model.config.train_ratios;
    let raised = Ratios { encoder: base.encoder.map(|r| r * a), decoder: base.decoder.map(|r| r * a) };
    let (mut sum, mut count) = (0.0, 0usize);
    for batch in data.chunks(8) {
        let refs: Vec<&SyntheticScene> = batch.iter().collect();
        let (img, _) = collate(&refs, &[])?;
        let fused = |ratios: Ratios| -> Result<Vec<f64>> {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, false);
            let x = g.constant(img.clone());
            let tr = model.trace(&mut g, &p, x, ratios)?;
            let f = g.concat_lastdim(&tr.decoder)?;
            Ok(g.value(f).data().to_vec())
        };
        let (u, v) = (fused(base)?, fused(raised)?);
        let c: usize = crate::model::DECODER_SOURCES.iter().map(|&s| model.config.stage_channels[s]).sum();
        for (x, y) in u.chunks(c).zip(v.chunks(c)) {
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
            sum += if nx * ny > 0.0 { dot / (nx * ny) } else { 1.0 };
            count += 1;
        }
    }
    Ok(sum / count as f64)
}
