use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Float> AdamState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = || params.iter().map(|p| vec![F::zero(); p.value.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update from the gradients stored on `params`.
///
/// Weight decay is decoupled: `p -= lr * wd * p` precedes the moment update.
pub fn adam_step<F: Float>(
    params: &mut ParamStore<F>,
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Config(format!(
            "optimizer state tracks {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let (one, eps) = (F::one(), F::of(cfg.eps));
    let step_size = F::of(lr / bc1);
    let inv_bc2 = F::of(1.0 / bc2);
    let decay = F::of(lr * weight_decay);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.len() != p.value.numel() || v.len() != m.len() {
            return Err(Error::shape("adam_step", &[m.len()], p.value.shape()));
        }
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for j in 0..value.len() {
            let g = grad[j];
            if weight_decay != 0.0 {
                value[j] -= decay * value[j];
            }
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let vhat = v[j] * inv_bc2;
            value[j] -= step_size * m[j] / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
