use serde::{Deserialize, Serialize};

use crate::graph::Graph;
use crate::layers::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments. Moments are indexed like the
/// [`ParamStore`] entries; buffers (non-trainable entries) are skipped.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

/// Gradients aligned with store entries; `None` means no gradient flowed.
pub type Grads<T> = Vec<Option<Vec<T>>>;

/// Sums the parameter-leaf gradients of a graph into store-aligned slots.
pub fn collect_grads<T: Scalar>(store: &ParamStore<T>, g: &Graph<T>) -> Grads<T> {
    let mut out: Grads<T> = vec![None; store.len()];
    for (id, grad) in g.param_grads() {
        match &mut out[id.0] {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }
    out
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.entries().iter().map(|e| vec![T::zero(); e.value.len()]).collect();
        Self { cfg, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &[T] {
        &self.m[id.0]
    }

    pub fn second_moment(&self, id: ParamId) -> &[T] {
        &self.v[id.0]
    }

    /// One update of every trainable parameter. Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let b1 = T::lit(self.cfg.beta1);
        let b2 = T::lit(self.cfg.beta2);
        let eps = T::lit(self.cfg.eps);
        let lr = T::lit(self.cfg.lr);
        let bc1 = T::one() - b1.powi(self.step as i32);
        let bc2 = T::one() - b2.powi(self.step as i32);
        for id in store.trainable_ids() {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let grad = grads.get(id.0).and_then(|g| g.as_deref());
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let g = grad.map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
