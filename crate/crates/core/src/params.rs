//! Named parameter storage and the two primitive layers built on it.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Result};
use crate::numerics::{Graph, Tensor, Var, LN_EPS};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named, learnable tensors.
///
/// Insertion order is the canonical order for optimizers and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return config_err(format!("duplicate parameter name `{name}`"));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of learned scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return config_err(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Records every parameter in `g`, as gradient-tracking leaves when
    /// `track` is set and as constants otherwise.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Bound {
        let vars = self.tensors.iter().map(|t| if track { g.leaf(t.clone()) } else { g.constant(t.clone()) }).collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles already recorded in a graph, one per parameter in store
    /// order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients after `g.backward`, one per parameter in store order.
    /// Parameters the loss does not reach get zeros.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars.iter().map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)))).collect()
    }
}

/// Weight initializers.
pub struct Init<'r, R: Rng> {
    pub rng: &'r mut R,
}

impl<'r, R: Rng> Init<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self { rng }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| dist.sample(self.rng)).collect()).expect("valid shape")
    }

    /// Normal draws clipped to two standard deviations.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let mut t = self.normal(shape, std);
        t.data_mut().iter_mut().for_each(|v| *v = v.clamp(-2.0 * std, 2.0 * std));
        t
    }
}

/// Dense layer over the last axis: `y = x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init.trunc_normal(&[fan_in, fan_out], std))?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?) } else { None };
        Ok(Self { weight, bias, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + if self.bias.is_some() { self.fan_out } else { 0 }
    }
}

/// Layer normalization over the last axis with learned affine parameters.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        Ok(Self { gamma, beta, channels })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

/// Layer normalization without learned parameters.
pub fn plain_norm(g: &mut Graph, x: Var) -> Result<Var> {
    let c = *g.shape(x).last().expect("rank >= 1");
    let gamma = g.constant(Tensor::ones(&[c]));
    let beta = g.constant(Tensor::zeros(&[c]));
    g.layer_norm(x, gamma, beta, LN_EPS)
}
