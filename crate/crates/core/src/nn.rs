//! Parameter naming and the affine layer shared by every branch.

use numkit::{init, Graph, ParameterSet, Tensor, Var};
use rand::Rng;

use crate::error::Result;

pub(crate) fn insert_linear<R: Rng>(
    params: &mut ParameterSet,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    params.insert(format!("{prefix}.w"), init::xavier(rng, fan_in, fan_out))?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

/// `x·W + b` with `W` stored as `fan_in × fan_out`.
pub(crate) fn linear(g: &mut Graph, params: &ParameterSet, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(params, &format!("{prefix}.w"))?;
    let b = g.param(params, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

pub(crate) fn insert_layer_norm(params: &mut ParameterSet, prefix: &str, dim: usize) -> Result<()> {
    params.insert(format!("{prefix}.g"), Tensor::filled(&[dim], 1.0))?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[dim]))?;
    Ok(())
}

pub(crate) fn layer_norm(g: &mut Graph, params: &ParameterSet, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(params, &format!("{prefix}.g"))?;
    let bias = g.param(params, &format!("{prefix}.b"))?;
    Ok(g.layer_norm(x, gain, bias, 1e-5)?)
}
