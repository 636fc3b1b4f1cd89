//! Adam optimizer over a `ParamSet`.

use crate::graph::Arr;
use crate::params::{GradStore, ParamSet};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        let m = params.iter().map(|(_, e)| Arr::zeros(e.value.shape())).collect();
        let v = params.iter().map(|(_, e)| Arr::zeros(e.value.shape())).collect();
        Adam { cfg, t: 0, m, v }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradStore) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.cfg.lr;
        let eps = self.cfg.eps;
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = params.value_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}
