use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::{collate, SyntheticScene};
use crate::isr::Phase;
use crate::model::{Checkpoint, EdaFormer, OPTIM_PREFIX};
use crate::numerics::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Cosine decay from `lr` to `lr · final_lr_fraction` after warmup.
    pub final_lr_fraction: f64,
    pub horizontal_flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 50,
            final_lr_fraction: 0.1,
            horizontal_flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad("eps must be positive, weight_decay non-negative, final_lr_fraction in [0, 1]");
        }
        Ok(())
    }

    /// Learning rate used for the update that completes step `step + 1`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.final_lr_fraction;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Optimizer moments and position.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl TrainState {
    pub fn new(model: &EdaFormer, seed: u64) -> Self {
        let zeros: Vec<Tensor> = model.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { step: 0, seed, m: zeros.clone(), v: zeros }
    }

    /// Checkpoint holding the weights and these optimizer moments.
    pub fn checkpoint(&self, model: &EdaFormer) -> Checkpoint {
        let mut ck = model.to_checkpoint(self.step, self.seed);
        for ((name, _), (m, v)) in model.params.iter().zip(self.m.iter().zip(&self.v)) {
            ck.tensors.push((format!("{OPTIM_PREFIX}m.{name}"), m.clone()));
            ck.tensors.push((format!("{OPTIM_PREFIX}v.{name}"), v.clone()));
        }
        ck
    }

    /// Restores moments from `ck`; a checkpoint without them starts fresh
    /// moments at its recorded step.
    pub fn from_checkpoint(model: &EdaFormer, ck: &Checkpoint) -> Result<Self> {
        let mut st = Self::new(model, ck.seed);
        st.step = ck.step;
        let find = |key: String| ck.tensors.iter().find(|(n, _)| *n == key).map(|(_, t)| t.clone());
        for (i, (name, t)) in model.params.iter().enumerate() {
            if let (Some(m), Some(v)) =
                (find(format!("{OPTIM_PREFIX}m.{name}")), find(format!("{OPTIM_PREFIX}v.{name}")))
            {
                if m.shape() != t.shape() || v.shape() != t.shape() {
                    return Err(Error::Format(format!("optimizer state for `{name}` has the wrong shape")));
                }
                st.m[i] = m;
                st.v[i] = v;
            }
        }
        Ok(st)
    }
}

/// Per-step record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Batch indices and flip flags for `step`; a pure function of
/// `(seed, step)` so resumed runs draw the same batches.
pub fn batch_plan(seed: u64, step: u64, n: usize, batch: usize, flip: bool) -> (Vec<usize>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let idx = (0..batch).map(|_| rng.random_range(0..n)).collect();
    let flips = (0..batch).map(|_| flip && rng.random_bool(0.5)).collect();
    (idx, flips)
}

/// One optimization step: loss and gradient at the training ratios,
/// then a decoupled-weight-decay Adam update.
pub fn train_step(
    model: &mut EdaFormer,
    state: &mut TrainState,
    data: &[SyntheticScene],
    cfg: &TrainConfig,
) -> Result<StepLog> {
    if data.is_empty() {
        return Err(Error::Usage("training needs at least one scene".into()));
    }
    let step = state.step;
    let lr = cfg.lr_at(step);
    let (idx, flips) = batch_plan(state.seed, step, data.len(), cfg.batch_size, cfg.horizontal_flip);
    let scenes: Vec<&SyntheticScene> = idx.iter().map(|&i| &data[i]).collect();
    let (img, targets) = collate(&scenes, &flips)?;

    let numeric =
        |msg: String, gn: f64| Error::Numeric(format!("step {step}: {msg} (lr {lr:.3e}, grad norm {gn:.3e})"));
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let x = g.constant(img);
    let schedule = model.config.schedule();
    let logits = model.model_forward(&mut g, &p, x, &schedule, Phase::Train).map_err(|e| match e {
        Error::Numeric(m) => numeric(m, f64::NAN),
        other => other,
    })?;
    let loss_var = g.cross_entropy(logits, &targets).map_err(|e| match e {
        Error::Numeric(m) => numeric(m, f64::NAN),
        other => other,
    })?;
    let loss = g.value(loss_var).data()[0];
    g.backward(loss_var)?;
    let grads = p.grads(&g);
    let grad_norm = grads.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(numeric(format!("non-finite loss {loss}"), grad_norm));
    }

    let t = (step + 1) as i32;
    let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    let ids: Vec<_> = model.params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let decay = model.params.get(id).rank() >= 2;
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let w = model.params.get_mut(id).data_mut();
        for (((w, &gr), m), v) in w.iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gr;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gr * gr;
            if decay {
                *w -= lr * cfg.weight_decay * *w;
            }
            *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
        }
    }
    state.step += 1;
    Ok(StepLog { step: state.step, loss, lr, grad_norm })
}

/// Runs steps until `state.step == cfg.steps`, returning the per-step log.
pub fn train(
    model: &mut EdaFormer,
    state: &mut TrainState,
    data: &[SyntheticScene],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    let mut log = Vec::new();
    while state.step < cfg.steps {
        let entry = train_step(model, state, data, cfg)?;
        on_step(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Fresh model and optimizer, trained from scratch.
pub fn train_new(
    config: crate::model::ModelConfig,
    data: &[SyntheticScene],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(EdaFormer, TrainState, Vec<StepLog>)> {
    let mut model = EdaFormer::new(config, seed)?;
    let mut state = TrainState::new(&model, seed);
    let log = train(&mut model, &mut state, data, cfg, |_| {})?;
    Ok((model, state, log))
}
