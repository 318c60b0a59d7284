//! Adam with bias correction, and the linear-warmup learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// First and second moment estimates for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore, cfg: &AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            base_lr: cfg.lr,
        }
    }
}

/// One Adam update of every parameter in `store` from its accumulated
/// gradient.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if state.m.len() != store.len() {
        return Err(Error::Dimension(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (p, m) in store.iter().zip(&state.m) {
        if p.grad.len() != m.len() {
            return Err(Error::Dimension(format!(
                "optimizer state for `{}` has {} entries, parameter has {}",
                p.name,
                m.len(),
                p.grad.len()
            )));
        }
        if let Some(bad) = p.grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::Training {
                param: p.name.clone(),
                reason: format!("non-finite gradient {bad}"),
            });
        }
    }

    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let g = p.grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr` over `warmup_epochs`, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_epochs: usize) -> Result<Self> {
        if warmup_epochs == 0 {
            return Err(Error::Config("warmup_epochs must be positive".into()));
        }
        Ok(Self {
            base_lr,
            warmup_epochs,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64
        } else {
            self.base_lr
        }
    }
}
