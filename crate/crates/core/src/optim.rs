//! Adam with optional global-norm clipping.

use crate::numerics::{Gradients, ParamStore};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            if !store.get(id).requires_grad {
                continue;
            }
            let n = g.len();
            let m = self.m[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let w = store.value_mut(id).data_mut();
            for (((wi, &gi), mi), vi) in w.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping. A non-positive `max_norm` disables clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let xv = g.param(x);
                let sq = g.mul(xv, xv).unwrap();
                let l = g.sum(sq);
                g.backward(l).unwrap()
            };
            opt.step(&mut store, &grads);
        }
        assert!(
            store.value(x).data().iter().all(|v| v.abs() < 1e-2),
            "{:?}",
            store.value(x)
        );
    }

    #[test]
    fn clipping_caps_norm() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![3.0, 4.0]));
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let sq = g.mul(xv, xv).unwrap();
        let l = g.sum(sq);
        let mut grads = g.backward(l).unwrap();
        let before = clip_global_norm(&mut grads, 1.0);
        assert!((before - 10.0).abs() < 1e-12);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
