use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Adam with bias correction. Moment buffers are created lazily for each
/// parameter the first time it receives a gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub moments: BTreeMap<ParamId, Moments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            step: 0,
            beta1,
            beta2,
            eps,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every parameter in `grads`. Non-finite gradients abort
    /// before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if store.get(*id).len() != g.len() {
                return Err(Error::shape("adam_step", store.get(*id).shape(), &[g.len()]));
            }
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    phase: "adam_step".into(),
                    step: self.step as usize,
                    detail: format!("gradient of {} has {} at index {pos}", store.name(*id), g[pos]),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let mom = self.moments.entry(*id).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let theta = store.get_mut(*id).data_mut();
            for i in 0..g.len() {
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g[i];
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = mom.m[i] / c1;
                let v_hat = mom.v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Piecewise-constant linear decay of the initial rate:
/// `base_lr · max(0, 1 − decay_fraction · ⌊t / decay_interval⌋)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_fraction: f64,
    pub decay_interval: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64) -> Self {
        Self {
            base_lr,
            decay_fraction: 0.001,
            decay_interval: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || self.decay_fraction < 0.0 || self.decay_interval == 0 {
            return Err(Error::Config(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at_step(&self, t: u64) -> f64 {
        let periods = (t / self.decay_interval) as f64;
        self.base_lr * (1.0 - self.decay_fraction * periods).max(0.0)
    }
}
