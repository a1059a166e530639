//! Adam restricted to touched elements, and the warmup/decay schedule.

use indexmap::IndexMap;

use crate::error::{dim_err, Result};
use crate::numerics::{Real, Tensor};
use crate::supernet::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to touched elements only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.0,
        }
    }
}

/// Moments and per-element update counts of one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: Vec<u32>,
}

impl AdamSlot {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: vec![0; n],
        }
    }
}

/// One bias-corrected Adam update of `params[i]` for every `i` in `indices`
/// (all elements when `None`). Elements outside `indices` keep their value and
/// their moments.
pub fn adam_step(
    params: &mut [Real],
    grads: &[Real],
    slot: &mut AdamSlot,
    lr: f64,
    cfg: &AdamConfig,
    indices: Option<&[usize]>,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || slot.m.len() != n || slot.v.len() != n || slot.t.len() != n {
        return Err(dim_err(format!(
            "adam: {n} params, {} grads, state of {}",
            grads.len(),
            slot.m.len()
        )));
    }
    let mut update = |i: usize| {
        let g = grads[i] as f64;
        let s = slot.t[i] + 1;
        slot.t[i] = s;
        slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
        slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = slot.m[i] / (1.0 - cfg.beta1.powi(s as i32));
        let vhat = slot.v[i] / (1.0 - cfg.beta2.powi(s as i32));
        let p = params[i] as f64;
        params[i] = (p - lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p)) as Real;
    };
    match indices {
        Some(idx) => idx.iter().for_each(|&i| update(i)),
        None => (0..n).for_each(update),
    }
    Ok(())
}

/// Adam state over a named parameter set.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub cfg: AdamConfig,
    slots: IndexMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            slots: IndexMap::new(),
        }
    }

    /// Update every tensor in `extents` inside its prefix box.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &IndexMap<String, Tensor>,
        extents: &[(String, Vec<usize>)],
        lr: f64,
    ) -> Result<()> {
        for (name, ext) in extents {
            let (Some(p), Some(g)) = (params.get_mut(name), grads.get(name)) else {
                return Err(dim_err(format!("no parameter or gradient for `{name}`")));
            };
            let slot = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| AdamSlot::new(p.numel()));
            if ext.as_slice() == p.shape() {
                adam_step(p.data_mut(), g.data(), slot, lr, &self.cfg, None)?;
            } else {
                let idx = Tensor::prefix_box_indices(p.shape(), ext);
                adam_step(p.data_mut(), g.data(), slot, lr, &self.cfg, Some(&idx))?;
            }
        }
        Ok(())
    }

    pub fn slot(&self, name: &str) -> Option<&AdamSlot> {
        self.slots.get(name)
    }
}

/// Linear warmup from 0 over `warmup` steps, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else if total > warmup {
        peak * (total.saturating_sub(step)) as f64 / (total - warmup) as f64
    } else {
        peak
    }
}
