//! Adam with per-parameter step counts.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Moment buffers of `id`, if it has been stepped.
    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        let i = id.index();
        Some((self.m.get(i)?.as_ref()?, self.v.get(i)?.as_ref()?))
    }

    pub fn steps(&self, id: ParamId) -> u64 {
        self.steps.get(id.index()).copied().unwrap_or(0)
    }

    /// One bias-corrected update of `id` with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, id: ParamId, grad: &Tensor, lr: f64) {
        let i = id.index();
        if self.m.len() <= i {
            self.m.resize(i + 1, None);
            self.v.resize(i + 1, None);
            self.steps.resize(i + 1, 0);
        }
        let shape = store.get(id).shape().to_vec();
        assert_eq!(shape, grad.shape(), "gradient shape for {}", store.name(id));
        let m = self.m[i].get_or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = self.v[i].get_or_insert_with(|| Tensor::zeros(shape));
        self.steps[i] += 1;
        let t = self.steps[i] as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let p = store.get_mut(id).data_mut();
        for (((p, m), v), g) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(grad.data()) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
        }
    }
}

/// `lr0 · (lr1 / lr0)^(step / total)`.
pub fn exponential_lr(lr0: f64, lr1: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (lr1 / lr0).powf(step as f64 / total as f64)
}
