use std::collections::BTreeMap;

use crate::error::{NumError, Result};
use crate::params::ParameterSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update of every parameter, then gradients are zeroed.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        let missing: Vec<&str> = params
            .iter()
            .filter(|(_, p)| p.grad.is_none())
            .map(|(n, _)| n)
            .collect();
        if !missing.is_empty() {
            return Err(NumError::Contract(format!(
                "adam step without gradients for: {}",
                missing.join(", ")
            )));
        }
        params.increment_step();
        let t = params.step() as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let n = p.value.len();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let grad = p.grad.as_mut().expect("checked above");
            for ((w, g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data_mut().iter_mut())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = beta1 * *mi + (1.0 - beta1) * *g;
                *vi = beta2 * *vi + (1.0 - beta2) * *g * *g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
                *g = 0.0;
            }
        }
        Ok(())
    }
}
