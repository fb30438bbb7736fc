use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::harness::data::{collate, SyntheticScene};
use crate::isr::{Phase, ReductionSchedule};
use crate::model::EdaFormer;
use crate::numerics::Tensor;

/// Segmentation quality over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub pixel_accuracy: f64,
    /// `None` for classes absent from both labels and predictions.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    /// `confusion[label][prediction]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let k = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let iou: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let fn_: u64 = confusion[c].iter().sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|r| confusion[r][c]).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        let pixel_accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        Self { pixel_accuracy, iou, miou, confusion }
    }
}

/// Accumulates `(label, prediction)` pairs; ignored labels are skipped.
pub fn confusion_matrix(labels: &[Option<usize>], preds: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if labels.len() != preds.len() {
        return dim_err(format!("{} labels vs {} predictions", labels.len(), preds.len()));
    }
    let mut cm = vec![vec![0u64; classes]; classes];
    for (l, &p) in labels.iter().zip(preds) {
        if let Some(l) = *l {
            if l >= classes || p >= classes {
                return dim_err(format!("class id out of range {classes}"));
            }
            cm[l][p] += 1;
        }
    }
    Ok(cm)
}

/// Arg-max over the last axis.
pub fn argmax_lastdim(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().expect("rank >= 1");
    logits
        .data()
        .chunks(k)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

/// Worker count from `EFASEG_THREADS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("EFASEG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

const EVAL_BATCH: usize = 8;

/// Metrics of `model` on `data` at the phase's ratios. Work is split across
/// [`worker_count`] threads; confusion counts are summed, so the result does
/// not depend on the split.
pub fn evaluate(
    model: &EdaFormer,
    data: &[SyntheticScene],
    schedule: &ReductionSchedule,
    phase: Phase,
) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Usage("evaluation needs at least one scene".into()));
    }
    let k = model.config.num_classes;
    let batches: Vec<&[SyntheticScene]> = data.chunks(EVAL_BATCH).collect();
    let workers = worker_count().min(batches.len()).max(1);
    let run = |chunk: &[&[SyntheticScene]]| -> Result<Vec<Vec<u64>>> {
        let mut cm = vec![vec![0u64; k]; k];
        for batch in chunk {
            let refs: Vec<&SyntheticScene> = batch.iter().collect();
            let (img, targets) = collate(&refs, &[])?;
            let logits = model.predict(&img, schedule, phase)?;
            let part = confusion_matrix(&targets, &argmax_lastdim(&logits), k)?;
            for (row, prow) in cm.iter_mut().zip(part) {
                row.iter_mut().zip(prow).for_each(|(a, b)| *a += b);
            }
        }
        Ok(cm)
    };
    let per = batches.len().div_ceil(workers);
    let parts: Vec<Result<Vec<Vec<u64>>>> = if workers == 1 {
        vec![run(&batches)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = batches.chunks(per).map(|c| s.spawn(move || run(c))).collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut cm = vec![vec![0u64; k]; k];
    for part in parts {
        for (row, prow) in cm.iter_mut().zip(part?) {
            row.iter_mut().zip(prow).for_each(|(a, b)| *a += b);
        }
    }
    Ok(Metrics::from_confusion(cm))
}
