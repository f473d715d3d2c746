use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::layers::BatchStats;
use crate::tensor::{Float, Tensor};

use super::params::{ParamId, ParamStore, StatStore, StatsId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass over a model's weights: the tape plus bookkeeping that
/// must be folded back into the model afterwards.
pub struct Forward<'m, F: Float> {
    pub tape: Tape<F>,
    params: &'m ParamStore<F>,
    stats: &'m StatStore<F>,
    mode: Mode,
    bound: Vec<Option<Var>>,
    frozen: Vec<bool>,
    updates: Vec<(StatsId, BatchStats<F>)>,
    taps: Vec<(String, Var)>,
}

/// Owned results of a pass, detached from the borrowed weights.
pub struct Outcome<F> {
    pub param_grads: Vec<(ParamId, Vec<F>)>,
    pub stat_updates: Vec<(StatsId, BatchStats<F>)>,
}

impl<'m, F: Float> Forward<'m, F> {
    pub fn new(params: &'m ParamStore<F>, stats: &'m StatStore<F>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            params,
            stats,
            mode,
            bound: vec![None; params.len()],
            frozen: vec![false; params.len()],
            updates: Vec::new(),
            taps: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'m ParamStore<F> {
        self.params
    }

    pub fn stats(&self) -> &'m StatStore<F> {
        self.stats
    }

    /// Treat every parameter whose name satisfies `pred` as a constant.
    /// Must be called before the parameter is first used.
    pub fn freeze(&mut self, pred: impl Fn(&str) -> bool) {
        for (i, p) in self.params.iter().enumerate() {
            if pred(&p.name) {
                self.frozen[i] = true;
            }
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.get(id).value.clone();
        let v = self.tape.leaf(value, !self.frozen[id.0]);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, x: Tensor<F>, requires_grad: bool) -> Var {
        self.tape.leaf(x, requires_grad)
    }

    pub(crate) fn record_stats(&mut self, id: StatsId, stats: BatchStats<F>) {
        self.updates.push((id, stats));
    }

    pub fn tap(&mut self, name: impl Into<String>, v: Var) {
        self.taps.push((name.into(), v));
    }

    pub fn taps(&self) -> &[(String, Var)] {
        &self.taps
    }

    pub fn tap_var(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.tape.value(v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradient accumulated on the leaf bound to `id`, if any.
    pub fn param_grad(&self, id: ParamId) -> Option<Tensor<F>> {
        self.bound[id.0].and_then(|v| self.tape.grad(v))
    }

    pub fn into_outcome(self) -> Outcome<F> {
        let param_grads = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = self.tape.grad_slice(v)?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect();
        Outcome {
            param_grads,
            stat_updates: self.updates,
        }
    }
}

/// Fold a pass's gradients and running-stat updates back into the weights.
pub fn absorb<F: Float>(params: &mut ParamStore<F>, stats: &mut StatStore<F>, outcome: Outcome<F>) {
    for (id, g) in outcome.param_grads {
        let p = params.get_mut(id);
        p.grad.data_mut().iter_mut().zip(&g).for_each(|(acc, v)| *acc += *v);
    }
    for (id, batch) in outcome.stat_updates {
        let s = stats.get_mut(id);
        let m = F::of(s.momentum);
        let keep = F::one() - m;
        for (r, b) in s.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * *b;
        }
        for (r, b) in s.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + m * *b;
        }
    }
}
