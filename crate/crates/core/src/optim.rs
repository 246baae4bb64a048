//! Adam with bias-corrected moments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Moment constants. Defaults are `0.9`, `0.999`, `1e-8`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moments and the shared step counter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: BTreeMap<ParamId, Tensor>,
    pub second: BTreeMap<ParamId, Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    /// One update of every parameter in `grads`. A non-finite gradient
    /// aborts before anything is written; `term` names the loss in the error.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, rate: f64, term: &str) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient of `{term}` for parameter `{}`",
                    store.get(*id).name
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            let (r, c) = g.dims();
            let m = self.first.entry(*id).or_insert_with(|| Tensor::zeros(r, c));
            let v = self.second.entry(*id).or_insert_with(|| Tensor::zeros(r, c));
            let values = store.values_mut(*id);
            for k in 0..g.len() {
                let gk = g.data()[k];
                let mk = beta1 * m.data()[k] + (1.0 - beta1) * gk;
                let vk = beta2 * v.data()[k] + (1.0 - beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                values[k] -= rate * (mk / c1) / ((vk / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
