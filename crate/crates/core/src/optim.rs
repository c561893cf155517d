//! Adam with bias correction, and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{LeoError, Result};
use crate::params::{ParamGroup, ParameterStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam step on every parameter whose group is in
    /// `groups`, using the gradients accumulated in `store`. Other parameters
    /// are left untouched.
    pub fn update(&mut self, store: &mut ParameterStore, groups: &[ParamGroup]) -> Result<()> {
        for (_, p) in store.iter().filter(|(_, p)| groups.contains(&p.group)) {
            if p.grad.shape() != p.value.shape() {
                return Err(LeoError::usage(format!("missing gradient for {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in store.iter_mut().filter(|p| groups.contains(&p.group)) {
            let m = self
                .first
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self
                .second
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let (b1, b2) = (self.beta1, self.beta2);
            let grads = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i];
                md[i] = b1 * md[i] + (1.0 - b1) * g;
                vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of the gradients of the selected groups.
pub fn global_grad_norm(store: &ParameterStore, groups: &[ParamGroup]) -> f64 {
    store
        .iter()
        .filter(|(_, p)| groups.contains(&p.group))
        .map(|(_, p)| p.grad.data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales the selected gradients uniformly so their global norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(store: &mut ParameterStore, groups: &[ParamGroup], max_norm: f64) -> f64 {
    let norm = global_grad_norm(store, groups);
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in store.iter_mut().filter(|p| groups.contains(&p.group)) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// Slice form of [`clip_gradients`].
pub fn clip_slice(grads: &mut [f64], max_norm: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
}
