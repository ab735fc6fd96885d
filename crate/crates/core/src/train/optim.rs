use std::f64::consts::PI;

use crate::net::{ParamId, ParameterStore};
use crate::scalar::Scalar;

/// `lr_max · (1 + cos(π·step/total)) / 2`, clamped to the schedule range.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    if step >= total_steps {
        // cos(π) is not exactly -1 in floating point
        return 0.0;
    }
    lr_max * (1.0 + (PI * t).cos()) / 2.0
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g {
                *v = *v * s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Adam with bias correction. Moments are kept per store entry; frozen
/// groups and missing gradients are skipped entirely.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParameterStore<T>, cfg: AdamConfig) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| vec![T::zero(); e.tensor.numel()])
                .collect()
        };
        Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParameterStore<T>, grads: &[Option<Vec<T>>], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one, eps) = (T::one(), T::lit(eps));
        let (step, c2) = (T::lit(lr / c1), T::lit(c2));
        for (k, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let id = store.entries()[k].group;
            if store.is_frozen(id) {
                continue;
            }
            let param = store.tensor_mut(ParamId(k)).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                param[i] = param[i] - step * m[i] / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}
