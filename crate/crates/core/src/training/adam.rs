//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamKind, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One Adam update of a flat slice; `t` is the 1-based step count.
///
/// `θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)`.
pub fn adam_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let step = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        theta[i] -= lr * (step + cfg.weight_decay * theta[i]);
    }
}

/// Optimizer state over the trainable entries of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &GradStore<T>, lr: f64) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = store
                .iter()
                .map(|(_, e)| (e.kind == ParamKind::Trainable).then(|| (vec![0.0; e.value.numel()], vec![0.0; e.value.numel()])))
                .collect();
        }
        if self.moments.len() != store.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} entries, store has {}",
                self.moments.len(),
                store.len()
            )));
        }
        self.step += 1;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let Some((m, v)) = self.moments[id.0].as_mut() else {
                continue;
            };
            let g = grads.get(id);
            let value = store.get_mut(id);
            if g.shape() != value.shape() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), value.shape())));
            }
            let mut theta: Vec<f64> = value.data().iter().map(|x| x.to_f64_lossy()).collect();
            let grad: Vec<f64> = g.data().iter().map(|x| x.to_f64_lossy()).collect();
            adam_update(&mut theta, &grad, m, v, self.step, lr, &self.config);
            for (dst, src) in value.data_mut().iter_mut().zip(theta) {
                *dst = T::of(src);
            }
        }
        Ok(())
    }
}
