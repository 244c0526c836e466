use ndarray::{ArrayD, Zip};

use crate::float::Float;
use crate::nn::param::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with bias correction. Moment buffers are indexed like the store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<F>) -> Self {
        let zeros =
            |_| -> Vec<ArrayD<F>> { store.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect() };
        Self { cfg, step: 0, m: zeros(()), v: zeros(()) }
    }

    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let step_size = F::of(c.lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(c.eps);
        let wd = F::of(c.weight_decay);
        for (id, g) in grads.iter() {
            if !store.get(id).trainable {
                continue;
            }
            let i = id.index();
            let value = store.value_mut(id);
            Zip::from(value).and(&mut self.m[i]).and(&mut self.v[i]).and(g).for_each(|p, m, v, &g| {
                let g = g + wd * *p;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            });
        }
    }
}
