//! Central finite-difference gradient checks.
//!
//! The checker only ever evaluates the forward pass, so it stays independent
//! of the backward code it is verifying.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// Magnitudes below this are compared absolutely rather than relatively.
/// Central differences carry roundoff of order `1e-16·|f|/eps`, which would
/// otherwise dominate the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Name (or input index) and flat element index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, what: &str, i: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            if e >= self.max_rel_err {
                self.worst = Some((what.to_string(), i));
            }
        }
    }

    fn empty() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: None,
            checked: 0,
        }
    }
}

/// Checks the gradient of `f` with respect to each tensor in `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss, &mut ParameterSet::new())?;

    let mut report = GradCheckReport::empty();
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + eps;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = orig - eps;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            report.record(&format!("input{k}"), i, analytic.data()[i], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to every scalar in `params`.
pub fn check_params<F>(params: &ParameterSet, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
{
    let mut work = params.clone();
    for (_, p) in work.iter_mut() {
        p.grad = None;
    }
    let mut g = Graph::new();
    let loss = f(&mut g, &work)?;
    g.backward(loss, &mut work)?;
    let analytic: Vec<(String, Tensor)> = work
        .iter()
        .map(|(n, p)| {
            let grad = p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            (n.to_string(), grad)
        })
        .collect();

    let eval = |ps: &ParameterSet| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, ps)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport::empty();
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let orig = work.value(name)?.data()[i];
            work.value_mut(name)?.data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.value_mut(name)?.data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.value_mut(name)?.data_mut()[i] = orig;
            report.record(name, i, grad.data()[i], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}
