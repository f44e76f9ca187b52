//! Adam with decoupled weight decay, cosine schedule, and norm clipping.

use autodiff::Tensor;

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// `lr_init · ½(1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64) -> f64 {
    if total_steps == 0 {
        return lr_init;
    }
    let frac = (step.min(total_steps)) as f64 / total_steps as f64;
    lr_init * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

pub fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Per-parameter first/second moments and step counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub weight_decay: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect();
        Self {
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: vec![0; store.len()],
        }
    }

    /// Updates every parameter that has a gradient. A non-finite gradient
    /// rejects the whole step and leaves parameters and moments untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        if let Some((i, _)) = grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|g| !g.is_finite()))
        {
            let name = store
                .ids()
                .nth(i)
                .map(|id| store.name(id).to_string())
                .unwrap_or_default();
            return Err(Error::invalid(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - BETA1.powi(t);
            let bc2 = 1.0 - BETA2.powi(t);
            let decay = 1.0 - lr * self.weight_decay;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = grad.data()[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] = p[j] * decay - lr * mh / (vh.sqrt() + EPS);
            }
        }
        Ok(())
    }
}
