use crate::params::{Gradients, ParamStore};
use crate::real::Real;

/// Adam with optional decoupled weight decay (AdamW when `weight_decay > 0`).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self { weight_decay, ..Self::new(lr) }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `store` that has a gradient.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        if self.m.len() != store.len() {
            self.m = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(store, id) else { continue };
            let g: Vec<f64> = g.data().iter().map(|v| v.as_f64()).collect();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut w = p[i].as_f64();
                if self.weight_decay > 0.0 {
                    w -= self.lr * self.weight_decay * w;
                }
                w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                p[i] = T::lit(w);
            }
        }
    }
}
