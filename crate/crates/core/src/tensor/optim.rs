// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use super::{Element, Gradients, ParamId, Storage, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam moments keyed by parameter identity.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<ParamId, (Storage, Storage)>,
}

impl OptimState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, param: &Tensor) -> Option<(&Storage, &Storage)> {
        param
            .param_id()
            .and_then(|id| self.moments.get(&id))
            .map(|(m, v)| (m, v))
    }
}

fn update<T: Element>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], cfg: &AdamConfig, step: u64) {
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(step as i32));
    let c2 = T::one() - T::lit(cfg.beta2.powi(step as i32));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        p[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// One Adam update over `params`. Parameters absent from `grads` are treated
/// as having zero gradient.
pub fn adam_step(params: &mut [&mut Tensor], grads: &Gradients, state: &mut OptimState) -> Result<()> {
    state.step += 1;
    let step = state.step;
    let cfg = state.config;
    for param in params.iter_mut() {
        let id = param
            .param_id()
            .ok_or_else(|| Error::InvalidArgument("adam_step on a non-parameter tensor".into()))?;
        let grad = grads.get_or_zero(param);
        if grad.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let dtype = param.dtype();
        let n = param.numel();
        let (m, v) = state
            .moments
            .entry(id)
            .or_insert_with(|| (Storage::zeros(dtype, n), Storage::zeros(dtype, n)));
        let mut data = param.storage().clone();
        match (&mut data, grad.storage(), m, v) {
            (Storage::F32(p), Storage::F32(g), Storage::F32(m), Storage::F32(v)) => {
                update(p, g, m, v, &cfg, step)
            }
            (Storage::F64(p), Storage::F64(g), Storage::F64(m), Storage::F64(v)) => {
                update(p, g, m, v, &cfg, step)
            }
            _ => {
                return Err(Error::DTypeMismatch {
                    op: "adam_step",
                    lhs: dtype,
                    rhs: grad.dtype(),
                })
            }
        }
        param.set_data(data)?;
    }
    Ok(())
}
