//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape once in reverse, so the cost of a gradient is a small constant
//! multiple of the forward pass. Ops work on whole matrices; attention and
//! layer norm are fused so a transformer block is a handful of nodes.

use crate::error::{dim_err, NumError, Result};
use crate::kernels::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Exp,
    Ln,
    Sqrt,
    Tanh,
    Sigmoid,
    Gelu,
    Relu,
    Square,
    Recip,
    Pow(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Unfold {
        x: Var,
        k: usize,
        stride: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        probs: Vec<f64>,
    },
    Cross3(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
    grad: Option<Vec<f64>>,
}

/// The tape. One graph per forward pass; drop it after `backward`.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulCol(..) => "mul_col",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SumLast(..) => "sum_last",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Unary(_, u) => match u {
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Sqrt => "sqrt",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Gelu => "gelu",
            Unary::Relu => "relu",
            Unary::Square => "square",
            Unary::Recip => "recip",
            Unary::Pow(_) => "pow",
        },
        Op::Clamp(..) => "clamp",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::GatherRows { .. } => "gather_rows",
        Op::Unfold { .. } => "unfold",
        Op::Attention { .. } => "attention",
        Op::Cross3(..) => "cross3",
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf created with [`Graph::input`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Attention probabilities saved by an [`Graph::attention`] node, laid out
    /// as `[group][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn leaf_node(&mut self, value: Tensor, requires_grad: bool, param: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf_node(value, false, None)
    }

    /// A differentiable leaf whose gradient is kept on the graph.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf_node(value, true, None)
    }

    /// A differentiable leaf bound to a named parameter; `backward` adds its
    /// gradient into the parameter set.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        let value = params
            .get(name)
            .ok_or_else(|| NumError::Contract(format!("unknown parameter `{name}`")))?
            .value
            .clone();
        Ok(self.leaf_node(value, true, Some(name.to_string())))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumError::NonFinite {
                op: op_name(&op),
                node: self.nodes.len(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return dim_err(op, sa, sb);
        }
        Ok(())
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return dim_err("matmul", self.shape(a), self.shape(b));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        self.push(t, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(a), &[a])
    }

    /// Rowwise cross product of two `m×3` matrices.
    pub fn cross3(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cross3", a, b)?;
        let (m, c) = self.dims2(a)?;
        if c != 3 {
            return dim_err("cross3", self.shape(a), &[m, 3]);
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * 3];
        for r in 0..m {
            let (p, q) = (&x[r * 3..r * 3 + 3], &y[r * 3..r * 3 + 3]);
            out[r * 3] = p[1] * q[2] - p[2] * q[1];
            out[r * 3 + 1] = p[2] * q[0] - p[0] * q[2];
            out[r * 3 + 2] = p[0] * q[1] - p[1] * q[0];
        }
        self.push(Tensor::new(vec![m, 3], out)?, Op::Cross3(a, b), &[a, b])
    }

    // ---- elementwise ---------------------------------------------------

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op_name(&op), a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.value(row).len() != n {
            return dim_err("add_row", self.shape(a), self.shape(row));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            add_into(&mut data[i * n..(i + 1) * n], &r);
        }
        self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(a, row), &[a, row])
    }

    /// Scales row `i` of an `m×n` matrix by entry `i` of an `m×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.value(col).len() != m {
            return dim_err("mul_col", self.shape(a), self.shape(col));
        }
        let c = self.value(col).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for v in &mut data[i * n..(i + 1) * n] {
                *v *= c[i];
            }
        }
        self.push(Tensor::new(vec![m, n], data)?, Op::MulCol(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.map_value(a, |x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.map_value(a, |x| x + s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    fn map_value(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    fn unary(&mut self, a: Var, u: Unary) -> Result<Var> {
        let t = match u {
            Unary::Exp => self.map_value(a, f64::exp),
            Unary::Ln => self.map_value(a, f64::ln),
            Unary::Sqrt => self.map_value(a, f64::sqrt),
            Unary::Tanh => self.map_value(a, f64::tanh),
            Unary::Sigmoid => self.map_value(a, sigmoid),
            Unary::Gelu => self.map_value(a, gelu),
            Unary::Relu => self.map_value(a, |x| x.max(0.0)),
            Unary::Square => self.map_value(a, |x| x * x),
            Unary::Recip => self.map_value(a, |x| 1.0 / x),
            Unary::Pow(p) => self.map_value(a, |x| x.powf(p)),
        };
        self.push(t, Op::Unary(a, u), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Ln)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }
    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Gelu)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Recip)
    }
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(a, Unary::Pow(p))
    }

    /// Clamps into `[lo, hi]`; the gradient is passed only where the input
    /// was inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.map_value(a, |x| x.clamp(lo, hi));
        self.push(t, Op::Clamp(a, lo, hi), &[a])
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.sum() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums over the last axis, keeping it with length 1.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = *v.shape().last().unwrap_or(&1);
        let data: Vec<f64> = v.data().chunks(n).map(|c| c.iter().sum()).collect();
        let mut shape = v.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        } else {
            shape.push(1);
        }
        self.push(Tensor::new(shape, data)?, Op::SumLast(a), &[a])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(NumError::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = v.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    y[at(j)] /= z;
                }
            }
        }
        let t = Tensor::new(shape, y)?;
        self.push(
            t,
            Op::Softmax {
                x: a,
                outer,
                len,
                inner,
            },
            &[a],
        )
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let n = *v.shape().last().unwrap_or(&1);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return dim_err("layer_norm", v.shape(), self.shape(gain));
        }
        let rows = v.len() / n;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; v.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v.data()[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mu) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    // ---- structural ----------------------------------------------------

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if start >= end || end > n {
            return dim_err("slice_cols", self.shape(a), &[start, end]);
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        self.push(Tensor::new(vec![m, w], data)?, Op::SliceCols { x: a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NumError::Contract("concat_cols of nothing".into()))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return dim_err("concat_cols", self.shape(first), self.shape(p));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            Tensor::new(vec![m, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if start >= end || end > m {
            return dim_err("slice_rows", self.shape(a), &[start, end]);
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        self.push(
            Tensor::new(vec![end - start, n], data)?,
            Op::SliceRows { x: a, start },
            &[a],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NumError::Contract("concat_rows of nothing".into()))?;
        let (_, n) = self.dims2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pn != n {
                return dim_err("concat_rows", self.shape(first), self.shape(p));
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            Tensor::new(vec![rows, n], data)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Output row `r` is input row `idx[r]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if idx.is_empty() {
            return Err(NumError::Contract("gather_rows with no indices".into()));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return dim_err("gather_rows", &[m, n], &[i]);
            }
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        self.push(
            Tensor::new(vec![idx.len(), n], data)?,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    /// Sliding windows over rows: `F×C` becomes `J×(k·C)` with
    /// `J = (F − k)/stride + 1`; window `j` starts at row `j·stride`.
    pub fn unfold_rows(&mut self, a: Var, k: usize, stride: usize) -> Result<Var> {
        let (f, c) = self.dims2(a)?;
        if k == 0 || stride == 0 || f < k {
            return dim_err("unfold_rows", &[f, c], &[k, stride]);
        }
        let j = (f - k) / stride + 1;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(j * k * c);
        for w in 0..j {
            let s = w * stride;
            data.extend_from_slice(&src[s * c..(s + k) * c]);
        }
        self.push(
            Tensor::new(vec![j, k * c], data)?,
            Op::Unfold { x: a, k, stride },
            &[a],
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// Rows of `q`, `k` and `v` are split into `groups` equal blocks that
    /// attend only within themselves (one block per sequence or frame).
    /// Columns are split into `heads` equal slices; the score scale is
    /// `1/sqrt(d_k)` with `d_k` the per-head key width.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: usize) -> Result<Var> {
        let (nq_all, d) = self.dims2(q)?;
        let (nk_all, dk) = self.dims2(k)?;
        let (nv_all, dv) = self.dims2(v)?;
        if d != dk || nk_all != nv_all {
            return dim_err("attention", self.shape(q), self.shape(k));
        }
        if heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(NumError::Contract(format!(
                "attention width {d}/{dv} not divisible by {heads} heads"
            )));
        }
        if groups == 0 || nq_all % groups != 0 || nk_all % groups != 0 {
            return Err(NumError::Contract(format!(
                "attention rows {nq_all}/{nk_all} not divisible into {groups} groups"
            )));
        }
        let (nq, nk) = (nq_all / groups, nk_all / groups);
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; groups * heads * nq * nk];
        let mut out = vec![0.0; nq_all * dv];
        let mut scores = vec![0.0; nk];
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..nq {
                    let qrow = &qd[(g * nq + i) * d + h * dh..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kd[(g * nk + j) * d + h * dh..][..dh];
                        *s = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let prow = &mut probs[((g * heads + h) * nq + i) * nk..][..nk];
                    let orow = &mut out[(g * nq + i) * dv + h * dvh..][..dvh];
                    for j in 0..nk {
                        let p = scores[j] / z;
                        prow[j] = p;
                        let vrow = &vd[(g * nk + j) * dv + h * dvh..][..dvh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![nq_all, dv], out)?;
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
            &[q, k, v],
        )
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients of parameter leaves are added into `params`; gradients of
    /// [`Graph::input`] leaves are added onto the graph. Both accumulate across
    /// calls until explicitly zeroed.
    pub fn backward(&mut self, loss: Var, params: &mut ParameterSet) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if let Some(name) = &node.param {
                    params.accumulate_grad(name, &g)?;
                } else {
                    let n = &mut self.nodes[id];
                    match &mut n.grad {
                        Some(acc) => add_into(acc, &g),
                        None => n.grad = Some(g),
                    }
                }
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[id].value.data();

        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().expect("matrix");
                let n = nodes[b.0].value.dims2().expect("matrix").1;
                if let Some(da) = slot(nodes, adj, *a) {
                    gemm_nt_acc(g, val(*b), da, m, n, k);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    gemm_tn_acc(val(*a), g, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    for (d, x) in db.iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                if let Some(da) = slot(nodes, adj, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * xb[i];
                    }
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * xa[i];
                    }
                }
            }
            Op::AddRow(a, r) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    add_into(da, g);
                }
                if let Some(dr) = slot(nodes, adj, *r) {
                    let n = dr.len();
                    for chunk in g.chunks(n) {
                        add_into(dr, chunk);
                    }
                }
            }
            Op::MulCol(a, c) => {
                let n = nodes[a.0].value.dims2().expect("matrix").1;
                let (xa, xc) = (val(*a), val(*c));
                if let Some(da) = slot(nodes, adj, *a) {
                    for (i, (drow, grow)) in da.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        for (d, x) in drow.iter_mut().zip(grow) {
                            *d += x * xc[i];
                        }
                    }
                }
                if let Some(dc) = slot(nodes, adj, *c) {
                    for (i, (grow, arow)) in g.chunks(n).zip(xa.chunks(n)).enumerate() {
                        dc[i] += grow.iter().zip(arow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += s * x;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    add_into(da, g);
                }
            }
            Op::Sum(a) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    let s = g[0] / da.len() as f64;
                    for d in da.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::SumLast(a) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    let n = da.len() / g.len();
                    for (chunk, &x) in da.chunks_mut(n).zip(g) {
                        for d in chunk {
                            *d += x;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = nodes[a.0].value.dims2().expect("matrix");
                if let Some(da) = slot(nodes, adj, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..*len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..*len {
                                dx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = nodes[gain.0].value.len();
                let gv = val(*gain);
                if let Some(dg) = slot(nodes, adj, *gain) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(db) = slot(nodes, adj, *bias) {
                    for grow in g.chunks(n) {
                        add_into(db, grow);
                    }
                }
                if let Some(dx) = slot(nodes, adj, *x) {
                    let mut dh = vec![0.0; n];
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dh[j] = grow[j] * gv[j];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        let c = inv_std[r] / n as f64;
                        for j in 0..n {
                            dx[r * n + j] += c * (n as f64 * dh[j] - s1 - hrow[j] * s2);
                        }
                    }
                }
            }
            Op::Unary(a, u) => {
                let x = val(*a);
                if let Some(da) = slot(nodes, adj, *a) {
                    for i in 0..g.len() {
                        let d = match u {
                            Unary::Exp => out[i],
                            Unary::Ln => 1.0 / x[i],
                            Unary::Sqrt => 0.5 / out[i],
                            Unary::Tanh => 1.0 - out[i] * out[i],
                            Unary::Sigmoid => out[i] * (1.0 - out[i]),
                            Unary::Gelu => gelu_grad(x[i]),
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * x[i],
                            Unary::Recip => -out[i] * out[i],
                            Unary::Pow(p) => p * x[i].powf(p - 1.0),
                        };
                        da[i] += g[i] * d;
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                if let Some(da) = slot(nodes, adj, *a) {
                    for i in 0..g.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = nodes[x.0].value.dims2().expect("matrix").1;
                let w = nodes[id].value.dims2().expect("matrix").1;
                if let Some(dx) = slot(nodes, adj, *x) {
                    for (i, grow) in g.chunks(w).enumerate() {
                        add_into(&mut dx[i * n + start..i * n + start + w], grow);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[id].value.dims2().expect("matrix").1;
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.dims2().expect("matrix").1;
                    if let Some(dp) = slot(nodes, adj, p) {
                        for (i, grow) in g.chunks(total).enumerate() {
                            add_into(&mut dp[i * w..(i + 1) * w], &grow[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = nodes[x.0].value.dims2().expect("matrix").1;
                if let Some(dx) = slot(nodes, adj, *x) {
                    add_into(&mut dx[start * n..start * n + g.len()], g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(dp) = slot(nodes, adj, p) {
                        add_into(dp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let n = nodes[x.0].value.dims2().expect("matrix").1;
                if let Some(dx) = slot(nodes, adj, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::Unfold { x, k, stride } => {
                let c = nodes[x.0].value.dims2().expect("matrix").1;
                if let Some(dx) = slot(nodes, adj, *x) {
                    for (w, grow) in g.chunks(k * c).enumerate() {
                        let s = w * stride;
                        add_into(&mut dx[s * c..(s + k) * c], grow);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => self.attention_backward(g, (*q, *k, *v), *heads, *groups, probs, adj),
            Op::Cross3(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let cross = |p: &[f64], q: &[f64]| {
                    [
                        p[1] * q[2] - p[2] * q[1],
                        p[2] * q[0] - p[0] * q[2],
                        p[0] * q[1] - p[1] * q[0],
                    ]
                };
                // d(a×b)/da · g = b × g, d(a×b)/db · g = g × a
                if let Some(da) = slot(nodes, adj, *a) {
                    for r in 0..g.len() / 3 {
                        let c = cross(&xb[r * 3..r * 3 + 3], &g[r * 3..r * 3 + 3]);
                        add_into(&mut da[r * 3..r * 3 + 3], &c);
                    }
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    for r in 0..g.len() / 3 {
                        let c = cross(&g[r * 3..r * 3 + 3], &xa[r * 3..r * 3 + 3]);
                        add_into(&mut db[r * 3..r * 3 + 3], &c);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        groups: usize,
        probs: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let (nq_all, d) = self.nodes[q.0].value.dims2().expect("matrix");
        let nk_all = self.nodes[k.0].value.dims2().expect("matrix").0;
        let dv = self.nodes[v.0].value.dims2().expect("matrix").1;
        let (nq, nk) = (nq_all / groups, nk_all / groups);
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![0.0; nq_all * d];
        let mut dk = vec![0.0; nk_all * d];
        let mut dvv = vec![0.0; nk_all * dv];
        let mut ds = vec![0.0; nk];
        for gi in 0..groups {
            for h in 0..heads {
                for i in 0..nq {
                    let prow = &probs[((gi * heads + h) * nq + i) * nk..][..nk];
                    let grow = &g[(gi * nq + i) * dv + h * dvh..][..dvh];
                    let mut dot = 0.0;
                    for j in 0..nk {
                        let vrow = &vd[(gi * nk + j) * dv + h * dvh..][..dvh];
                        let dp: f64 = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        ds[j] = dp;
                        dot += dp * prow[j];
                        let dvrow = &mut dvv[(gi * nk + j) * dv + h * dvh..][..dvh];
                        for (o, &x) in dvrow.iter_mut().zip(grow) {
                            *o += prow[j] * x;
                        }
                    }
                    let qoff = (gi * nq + i) * d + h * dh;
                    for j in 0..nk {
                        let s = prow[j] * (ds[j] - dot) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let koff = (gi * nk + j) * d + h * dh;
                        for c in 0..dh {
                            dq[qoff + c] += s * kd[koff + c];
                            dk[koff + c] += s * qd[qoff + c];
                        }
                    }
                }
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dvv)] {
            if self.nodes[var.0].requires_grad {
                let len = grad.len();
                add_into(adj[var.0].get_or_insert_with(|| vec![0.0; len]), &grad);
            }
        }
    }
}
