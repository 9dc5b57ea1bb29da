use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment estimates for every parameter in a [`ParamStore`], in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()).expect("parameter shapes are valid"))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update with bias correction and decoupled weight decay.
///
/// Each trainable parameter is first scaled by `1 - lr·weight_decay`, then
/// moved by `lr·m̂/(√v̂ + ε)`. Fails without touching anything if a trainable
/// parameter has no gradient.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Config(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    for id in params.ids() {
        let t = params.get(id);
        if t.requires_grad() && t.grad().is_none() {
            return Err(Error::MissingGradient(params.name(id).to_string()));
        }
    }
    let AdamConfig {
        lr,
        weight_decay,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let decay = 1.0 - lr * weight_decay;

    for (i, id) in params.ids().enumerate() {
        let t = params.get_mut(id);
        if !t.requires_grad() {
            continue;
        }
        let grad = t.grad().expect("checked above").to_vec();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, p) in t.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}
