use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::numerics::ParamStore;

/// Linear warmup to `base` over `warmup` steps, then cosine decay to 0 at
/// `total`. Steps are 1-based.
pub fn learning_rate(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if warmup > 0 && step <= warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = (step.saturating_sub(warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (PI * progress).cos())
}

/// Adam with decoupled weight decay on matrices and kernels (rank ≥ 2).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies the accumulated gradients of `store` with learning rate `lr`.
    pub fn update(&mut self, store: &mut ParamStore<f32>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let n = p.value.len();
            let (m, v) = self
                .moments
                .entry(name.to_owned())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let decay = if p.value.rank() >= 2 { self.weight_decay } else { 0.0 };
            for (j, (x, &g)) in p.value.data_mut().iter_mut().zip(p.grad.iter()).enumerate() {
                let g = g as f64;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let upd = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps) + decay * *x as f64;
                *x = (*x as f64 - lr * upd) as f32;
            }
        }
    }
}
