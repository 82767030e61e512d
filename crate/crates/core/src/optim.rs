//! Adam and step-decay learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::tensor::DenseArray;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update; parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, DenseArray>) {
        self.step_all(&mut [params], grads);
    }

    /// One update over several stores that share a gradient map.
    pub fn step_all(&mut self, stores: &mut [&mut ParamStore], grads: &BTreeMap<String, DenseArray>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for params in stores.iter_mut() {
            for (name, p) in params.iter_mut() {
                let Some(g) = grads.get(name) else { continue };
                let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
                let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
                for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, DenseArray>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.dot(g)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Multiplies the base rate by `factor` every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

impl StepDecay {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        if self.every == 0 {
            return base;
        }
        base * self.factor.powi((epoch / self.every) as i32)
    }
}
