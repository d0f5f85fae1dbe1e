use super::param::ParamStore;
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates for every parameter of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        AdamState { config, m: zeros(), v: zeros(), t: 0 }
    }

    /// One bias-corrected Adam update of every trainable parameter from its `grad`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if self.m.len() != store.len() {
            return Err(Error::shape("adam", format!("state for {} params, store has {}", self.m.len(), store.len())));
        }
        for p in store.params_mut().iter() {
            if p.trainable && !p.grad.is_finite() {
                return Err(Error::NonFinite("adam gradient"));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for k in 0..value.len() {
                let gk = grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                value[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    state.step(store, lr)
}

/// Cosine annealing from `lr0` at epoch 0 to `lr_min` at `total`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    let total = total.max(1);
    let epoch = epoch.min(total);
    let phase = std::f64::consts::PI * epoch as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos())
}
