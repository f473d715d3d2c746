use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<F: Float> {
    /// Hierarchical dotted path, unique within a model.
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F: Float> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let grad = value.zeros_like();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<F>> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Running mean/variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<F> {
    pub name: String,
    pub mean: Vec<F>,
    pub var: Vec<F>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StatStore<F> {
    entries: Vec<RunningStats<F>>,
}

impl<F: Float> StatStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: String, channels: usize, momentum: f64, eps: f64) -> StatsId {
        self.entries.push(RunningStats {
            name,
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
            momentum,
            eps,
        });
        StatsId(self.entries.len() - 1)
    }

    pub fn get(&self, id: StatsId) -> &RunningStats<F> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: StatsId) -> &mut RunningStats<F> {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &RunningStats<F>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut RunningStats<F>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cast<G: Float>(&self) -> StatStore<G> {
        StatStore {
            entries: self
                .entries
                .iter()
                .map(|e| RunningStats {
                    name: e.name.clone(),
                    mean: e.mean.iter().map(|v| G::of(v.f64())).collect(),
                    var: e.var.iter().map(|v| G::of(v.f64())).collect(),
                    momentum: e.momentum,
                    eps: e.eps,
                })
                .collect(),
        }
    }
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// U(-b, b) with b = sqrt(6 / fan_in).
    HeUniform {
        fan_in: usize,
    },
    /// U(-b, b) with b = 1 / sqrt(fan_in).
    FanInUniform {
        fan_in: usize,
    },
    Constant(f64),
}

/// Allocates parameters and batch-norm buffers in a fixed, seed-determined order.
pub struct Builder<'a, F: Float> {
    pub params: &'a mut ParamStore<F>,
    pub stats: &'a mut StatStore<F>,
    pub rng: &'a mut ChaCha8Rng,
    pub momentum: f64,
    pub eps: f64,
}

impl<F: Float> Builder<'_, F> {
    pub fn param(&mut self, name: String, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<F> = match init {
            Init::Constant(v) => vec![F::of(v); n],
            Init::HeUniform { fan_in } | Init::FanInUniform { fan_in } => {
                let bound = match init {
                    Init::HeUniform { .. } => (6.0 / fan_in as f64).sqrt(),
                    _ => 1.0 / (fan_in as f64).sqrt(),
                };
                (0..n).map(|_| F::of(self.rng.random_range(-bound..bound))).collect()
            }
        };
        self.params.add(name, Tensor::from_vec(shape, data)?)
    }

    pub fn running_stats(&mut self, name: String, channels: usize) -> StatsId {
        self.stats.add(name, channels, self.momentum, self.eps)
    }
}
