use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<R>>,
    pub second: BTreeMap<String, Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam update at learning rate `lr`. Frozen
    /// parameters are skipped; trainable parameters missing from `grads`
    /// are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<R>, grads: &BTreeMap<String, Tensor<R>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NanGradient(name.clone()));
            }
            let p = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let names: Vec<String> = params.names().filter(|n| !params.is_frozen(n)).cloned().collect();
        for name in names {
            let p = params.get_mut(&name).expect("listed above");
            let shape = p.shape().to_vec();
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let g = grads.get(&name);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
                let mi = beta1 * m.data()[i].as_f64() + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i].as_f64() + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = R::of(mi);
                v.data_mut()[i] = R::of(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                let pi = p.data()[i].as_f64() - update;
                p.data_mut()[i] = R::of(pi);
            }
        }
        Ok(())
    }
}
