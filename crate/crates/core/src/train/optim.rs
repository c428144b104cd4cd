//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::layers::{GradMap, ParamStore};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub step: u64,
    /// First and second moments in learnable-store order.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .learnable_ids()
            .iter()
            .map(|&id| Tensor::zeros(store.get(id).shape()))
            .collect();
        Adam {
            learning_rate,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update: `p ← p − lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) -> Result<()> {
        if grads.ids.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, gradient map has {}",
                self.m.len(),
                grads.ids.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let lr = self.learning_rate;
        for (k, (&id, g)) in grads.ids.iter().zip(&grads.grads).enumerate() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}
