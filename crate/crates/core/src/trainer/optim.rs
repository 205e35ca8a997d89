//! AdamW with decoupled weight decay and global-norm clipping.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.2 }
    }
}

/// First and second moment estimates for every trainable tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
    t: u32,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, ..Self::default() }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// One update of every trainable tensor in `params`. Weight decay is
    /// applied only to kinds for which [`crate::autograd::ParamKind::decays`]
    /// holds; frozen tensors are never touched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &IndexMap<String, Tensor>, lr: f64) -> Result<()> {
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut().filter(|(_, p)| p.trainable) {
            let g = grads.get(name).ok_or_else(|| Error::Internal(format!("no gradient for `{name}`")))?;
            if g.shape() != p.value.shape() {
                return Err(Error::Internal(format!("gradient of `{name}` has the wrong shape")));
            }
            let (rows, cols) = g.shape();
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(rows, cols));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(rows, cols));
            let decay = if p.kind.decays() { weight_decay } else { 0.0 };
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.value.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let update = (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
                pd[i] -= lr * (update + decay * pd[i]);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut IndexMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
