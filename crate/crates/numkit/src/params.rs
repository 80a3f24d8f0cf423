use std::collections::BTreeMap;

use crate::error::{dim_err, NumError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named trainable tensors plus the optimizer step counter.
///
/// Iteration is lexicographic by name so optimizer state and checkpoints
/// come out in the same order on every run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
    step: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumError::Contract(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Parameter { value, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NumError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| NumError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn increment_step(&mut self) {
        self.step += 1;
    }

    /// Sets every gradient to zeros (present, not absent).
    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| NumError::Contract(format!("gradient for unknown parameter `{name}`")))?;
        if grad.len() != p.value.len() {
            return dim_err("accumulate_grad", p.value.shape(), &[grad.len()]);
        }
        let g = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for (d, s) in g.data_mut().iter_mut().zip(grad) {
            *d += s;
        }
        Ok(())
    }

    /// Global L2 norm over all present gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Copies values from `other` for every name present in both sets.
    pub fn copy_values_from(&mut self, other: &ParameterSet) {
        for (name, p) in &mut self.params {
            if let Some(o) = other.params.get(name) {
                p.value = o.value.clone();
            }
        }
    }
}

/// Scales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm measured before clipping.
pub fn clip_grad_norm(params: &mut ParameterSet, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in params.params.values_mut() {
            if let Some(g) = &mut p.grad {
                for x in g.data_mut() {
                    *x *= s;
                }
            }
        }
    }
    norm
}
