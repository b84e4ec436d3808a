//! Adam with bias correction, and the cosine learning-rate schedule.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one pair per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

impl AdamState {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let mut s = AdamState::default();
        for (name, t) in store.iter() {
            s.m.insert(name.to_string(), Tensor::zeros(t.shape()));
            s.v.insert(name.to_string(), Tensor::zeros(t.shape()));
        }
        s
    }
}

/// One Adam update in place. `step` counts from 1. Parameters absent from
/// `grads` are treated as having zero gradient.
pub fn adam_step<'g>(
    params: &mut ParamStore,
    grads: impl IntoIterator<Item = (&'g str, &'g Tensor)>,
    state: &mut AdamState,
    lr: f32,
    hyper: AdamHyper,
    step: u64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Config("adam step counter starts at 1".into()));
    }
    let grads: IndexMap<&str, &Tensor> = grads.into_iter().collect();
    for name in grads.keys() {
        if !params.contains(name) {
            return Err(Error::Config(format!("gradient for unknown parameter '{name}'")));
        }
    }
    let AdamHyper { beta1, beta2, eps } = hyper;
    let bc1 = 1.0 - (beta1 as f64).powi(step as i32);
    let bc2 = 1.0 - (beta2 as f64).powi(step as i32);
    for (name, p) in params.iter_mut() {
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no first moment for '{name}'")))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no second moment for '{name}'")))?;
        let shape = p.shape();
        if m.shape() != shape || v.shape() != shape {
            return Err(Error::shape(format!("moment shape mismatch for '{name}'")));
        }
        let g = grads.get(name).copied();
        if let Some(g) = g {
            if g.shape() != shape {
                return Err(Error::shape(format!(
                    "gradient for '{name}' is {}, parameter is {shape}",
                    g.shape()
                )));
            }
        }
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
            let m_hat = md[i] as f64 / bc1;
            let v_hat = vd[i] as f64 / bc2;
            pd[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
        }
    }
    Ok(())
}

/// `lr0 * (1 + cos(pi * step / total)) / 2`, clamped to the schedule's end.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
}
