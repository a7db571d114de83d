//! Adam with bias correction and global-norm gradient clipping.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments, registry order.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> AdamState {
        let zeros = || store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        AdamState { lr, beta1, beta2, eps, step: 0, m: zeros(), v: zeros() }
    }
}

/// One textbook Adam update of every parameter in `store`.
pub fn adam_step(state: &mut AdamState, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::invalid(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (p, g) in store.iter().zip(grads) {
        match g {
            None => return Err(Error::invalid(format!("parameter {} has no gradient", p.name))),
            Some(g) if g.len() != p.data.len() => {
                return Err(Error::shape("adam", format!("gradient of {} has {} entries", p.name, g.len())))
            }
            Some(_) => {}
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(state.beta1, t);
    let c2 = 1.0 - libm::pow(state.beta2, t);
    for (i, p) in store.iter_mut().enumerate() {
        let g = grads[i].as_ref().expect("checked");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..g.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p.data[j] -= state.lr * m_hat / (libm::sqrt(v_hat) + state.eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = libm::sqrt(sq);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
    norm
}
