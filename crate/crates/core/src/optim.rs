//! Adaptive-moment optimizer over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::models::{ParamRole, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// `beta2 = 0.5` follows the image-translation training recipe.
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.5,
            eps: 1e-8,
        }
    }
}

/// Moment estimates mirroring a parameter set, with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    pub steps: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Adam {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
        }
    }

    /// One update of every trainable tensor whose id and role pass `select`.
    /// Descends on `grads`, or ascends when `ascend` is set.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &ParamSet,
        lr: f64,
        ascend: bool,
        select: impl Fn(usize, ParamRole) -> bool,
    ) {
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let sign = if ascend { 1.0 } else { -1.0 };
        for id in 0..params.len() {
            let role = params.entries()[id].role;
            if !role.is_trainable() || !select(id, role) {
                continue;
            }
            let g = grads.tensor(id).data();
            let m = self.m.tensor_mut(id).data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self.v.tensor_mut(id).data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let (m, v) = (self.m.tensor(id).data(), self.v.tensor(id).data());
            let p = params.tensor_mut(id).data_mut();
            for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
                let mhat = mi / c1;
                let vhat = vi / c2;
                *pi += sign * lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
