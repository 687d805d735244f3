//! Adam with bias correction and per-group update filtering.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{Group, ParamSet};

/// First/second moment buffers of a single parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied to this parameter.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Total number of applied steps, over all filters.
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }
}

/// Applies one bias-corrected Adam update to every parameter whose group is in
/// `groups`. Other parameters are left untouched. All gradients are cleared afterwards.
///
/// Moment bias correction uses the per-parameter update count, so parameters
/// that are only stepped under some filters are corrected consistently.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, groups: &[Group]) -> Result<()> {
    if let Some(p) = params.iter().find(|p| groups.contains(&p.group) && p.tensor.grad().is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.lr);
    for p in params.iter_mut() {
        if !groups.contains(&p.group) {
            continue;
        }
        let n = p.tensor.len();
        let mom = state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n], step: 0 });
        if mom.m.len() != n {
            return Err(Error::shape("adam_step", alloc::format!("moments of `{}` have wrong length", p.name)));
        }
        mom.step += 1;
        let c1 = 1.0 - libm::pow(b1, mom.step as f64);
        let c2 = 1.0 - libm::pow(b2, mom.step as f64);
        let grad = p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_default();
        let data = p.tensor.data_mut();
        for i in 0..n {
            let g = grad[i];
            mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g;
            mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g * g;
            let m_hat = mom.m[i] / c1;
            let v_hat = mom.v[i] / c2;
            data[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
    state.step += 1;
    params.clear_grads();
    Ok(())
}
