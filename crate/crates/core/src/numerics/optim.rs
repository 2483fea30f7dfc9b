use super::tensor::ParamStore;
use crate::error::{Error, Result};

/// Adam moments for every tensor in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
}

impl AdamState {
    /// Fresh state with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(params: &ParamStore) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore, beta1: f64, beta2: f64, eps_adam: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            beta1,
            beta2,
            eps_adam,
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `params`.
///
/// A tensor whose gradient is absent or identically zero did not take part
/// in the loss; its value and moments are left as they are. Every gradient
/// is checked for finiteness before anything is modified.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Usage(format!(
            "optimizer state tracks {} tensors, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    for id in params.ids() {
        if let Some(g) = params.get(id).grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: params.name(id).to_string(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps_adam);
    for id in params.ids().collect::<Vec<_>>() {
        let tensor = params.get_mut(id);
        let Some(g) = tensor.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        for (i, p) in tensor.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine annealing with warm restarts every `period` iterations.
pub fn cosine_lr(iter: usize, period: usize, lr_max: f64, lr_min: f64) -> f64 {
    assert!(period > 0, "cosine period must be positive");
    let phase = (iter % period) as f64 / period as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * phase).cos())
}
