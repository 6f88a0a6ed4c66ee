//! Adam with L2 weight decay and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay * param` (not decoupled).
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Moment accumulators for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let m: Vec<Vec<f64>> = params
            .iter()
            .map(|&p| vec![0.0; store.get(p).numel()])
            .collect();
        AdamState {
            config,
            v: m.clone(),
            m,
            params,
            step: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected Adam update of every owned parameter that has a
    /// gradient. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((&id, m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
            let t = store.get_mut(id);
            if t.numel() != m.len() {
                return Err(Error::shape("optimizer state does not match its parameter"));
            }
            let Some(grad) = t.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad[i] + weight_decay * data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let denom = (v[i] / bc2).sqrt() + eps;
                data[i] -= lr / bc1 * m[i] / denom;
            }
            if !data.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameter {}",
                    store.entry(id).name
                )));
            }
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi e / (total - 1))) / 2`. A one-epoch
/// schedule stays at `lr_max`.
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total <= 1 {
        return lr_max;
    }
    let phase = std::f64::consts::PI * epoch as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}
