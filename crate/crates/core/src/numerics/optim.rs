use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

/// Adam with bias correction. State is keyed by parameter name.
pub struct Adam {
    cfg: AdamConfig,
    m: ParamStore,
    v: ParamStore,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        params.ensure_same_layout(grads)?;
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?.data();
            let m = self.m.get_mut(name)?.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * gi;
            }
            let v = self.v.get_mut(name)?.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(name)?.data(), self.v.get(name)?.data());
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let delta = self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                // Skipping zero steps keeps signed zeros intact.
                if delta != 0.0 {
                    *pi -= delta;
                }
            }
        }
        Ok(())
    }
}

/// Plain gradient descent: `p ← p − lr·g`.
pub fn sgd_step(params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
    params.ensure_same_layout(grads)?;
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?.data();
        for (pi, gi) in p.data_mut().iter_mut().zip(g) {
            let delta = lr * gi;
            if delta != 0.0 {
                *pi -= delta;
            }
        }
    }
    Ok(())
}
