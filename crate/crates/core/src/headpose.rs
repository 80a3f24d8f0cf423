//! Head orientation branch.
//!
//! Head features pass through a small perceptron, an affine map to a 6D
//! rotation (two 3-vectors), Gram-Schmidt orthogonalization into a rotation
//! matrix, and a linear regression from the nine matrix entries to
//! yaw/pitch/roll. Euler angles use the ZYX intrinsic convention
//! `R = Rz(yaw)·Ry(pitch)·Rx(roll)` in both directions.

use std::f64::consts::PI;

use numkit::{init, Graph, ParameterSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{insert_linear, linear};

/// Norm below which a 6D column is treated as collapsed.
pub const GS_EPS: f64 = 1e-8;

/// |R₃₁| above this is treated as gimbal lock.
const GIMBAL_TOL: f64 = 1e-9;

/// Raw or normalized per-frame head feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadFeature(pub Vec<f64>);

/// Per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(CoreError::Dim(format!(
                "norm stats mean {} vs std {}",
                mean.len(),
                std.len()
            )));
        }
        if let Some(i) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(CoreError::Config(format!(
                "norm stats channel {i} has non-positive std {}",
                std[i]
            )));
        }
        Ok(Self { mean, std })
    }

    /// Population mean and standard deviation of each channel.
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for row in rows {
            if sum.is_empty() {
                sum = vec![0.0; row.len()];
                sq = vec![0.0; row.len()];
            }
            for (i, &x) in row.iter().enumerate() {
                sum[i] += x;
                sq[i] += x * x;
            }
            count += 1;
        }
        if count == 0 {
            return Err(CoreError::Data("no rows to compute norm stats from".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-12))
            .collect();
        Self::new(mean, std)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn normalize_slice(&self, raw: &[f64], out: &mut [f64]) {
        for i in 0..raw.len() {
            out[i] = (raw[i] - self.mean[i]) / self.std[i];
        }
    }
}

/// `(x − μ)/σ` per channel.
pub fn normalize_head(raw: &HeadFeature, stats: &NormStats) -> Result<HeadFeature> {
    if raw.0.len() != stats.dim() {
        return Err(CoreError::Dim(format!(
            "head feature length {} vs norm stats {}",
            raw.0.len(),
            stats.dim()
        )));
    }
    let mut out = vec![0.0; raw.0.len()];
    stats.normalize_slice(&raw.0, &mut out);
    Ok(HeadFeature(out))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation6D {
    pub a1: [f64; 3],
    pub a2: [f64; 3],
}

impl Rotation6D {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 6 {
            return Err(CoreError::Dim(format!("6D rotation needs 6 values, got {}", v.len())));
        }
        Ok(Self {
            a1: [v[0], v[1], v[2]],
            a2: [v[3], v[4], v[5]],
        })
    }
}

/// 3×3 rotation stored by columns `b1, b2, b3`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix {
    pub cols: [[f64; 3]; 3],
}

impl RotationMatrix {
    pub fn identity() -> Self {
        Self {
            cols: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn from_rows(r: [[f64; 3]; 3]) -> Self {
        let mut cols = [[0.0; 3]; 3];
        for (i, row) in r.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                cols[j][i] = v;
            }
        }
        Self { cols }
    }

    /// Entry at row `r`, column `c`.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.cols[c][r]
    }

    /// Row-major entries `r00, r01, …, r22`.
    pub fn row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.at(r, c);
            }
        }
        out
    }

    /// Columns stacked: `b1, b2, b3`.
    pub fn vec(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for c in 0..3 {
            out[c * 3..c * 3 + 3].copy_from_slice(&self.cols[c]);
        }
        out
    }

    pub fn from_vec(v: &[f64]) -> Self {
        let mut cols = [[0.0; 3]; 3];
        for c in 0..3 {
            cols[c].copy_from_slice(&v[c * 3..c * 3 + 3]);
        }
        Self { cols }
    }

    pub fn mul(&self, other: &RotationMatrix) -> RotationMatrix {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.at(i, k) * other.at(k, j)).sum();
            }
        }
        Self::from_rows(r)
    }

    pub fn transpose(&self) -> RotationMatrix {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            *row = self.cols[i];
        }
        Self::from_rows(r)
    }

    pub fn det(&self) -> f64 {
        dot(&self.cols[0], &cross(&self.cols[1], &self.cols[2]))
    }

    /// ‖RᵀR − I‖∞ (largest absolute entry).
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(&self.cols[i], &self.cols[j]) - target).abs());
            }
        }
        worst
    }

    pub fn frobenius_distance(&self, other: &RotationMatrix) -> f64 {
        let (a, b) = (self.vec(), other.vec());
        a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }
}

/// Yaw (about z), pitch (about y), roll (about x), radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerAngles {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Maps an angle into (−π, π].
fn wrap(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x <= -PI {
        x += 2.0 * PI;
    } else if x > PI {
        x -= 2.0 * PI;
    }
    x
}

pub fn gram_schmidt_6d(r: &Rotation6D) -> Result<RotationMatrix> {
    gram_schmidt_row(r, 0)
}

fn gram_schmidt_row(r: &Rotation6D, row: usize) -> Result<RotationMatrix> {
    let n1 = norm(&r.a1);
    if !(n1 > GS_EPS) {
        return Err(CoreError::Singular {
            vector: "a1",
            row,
            norm: n1,
        });
    }
    let b1 = r.a1.map(|x| x / n1);
    let d = dot(&b1, &r.a2);
    let u2 = [r.a2[0] - d * b1[0], r.a2[1] - d * b1[1], r.a2[2] - d * b1[2]];
    let n2 = norm(&u2);
    if !(n2 > GS_EPS) {
        return Err(CoreError::Singular {
            vector: "u2",
            row,
            norm: n2,
        });
    }
    let b2 = u2.map(|x| x / n2);
    let b3 = cross(&b1, &b2);
    Ok(RotationMatrix { cols: [b1, b2, b3] })
}

pub fn euler_to_rotation(e: &EulerAngles) -> RotationMatrix {
    let (sa, ca) = e.yaw.sin_cos();
    let (sb, cb) = e.pitch.sin_cos();
    let (sg, cg) = e.roll.sin_cos();
    RotationMatrix::from_rows([
        [ca * cb, ca * sb * sg - sa * cg, ca * sb * cg + sa * sg],
        [sa * cb, sa * sb * sg + ca * cg, sa * sb * cg - ca * sg],
        [-sb, cb * sg, cb * cg],
    ])
}

/// ZYX decomposition. At gimbal lock (|R₃₁| > 1 − 1e-9) roll is reported as
/// 0 and the remaining rotation about the shared axis goes into yaw.
pub fn euler_from_rotation(r: &RotationMatrix) -> Result<EulerAngles> {
    let err = r.orthonormality_error();
    let det = r.det();
    if err > 1e-6 || (det - 1.0).abs() > 1e-6 {
        return Err(CoreError::Contract(format!(
            "not a rotation: orthonormality error {err:e}, det {det}"
        )));
    }
    let r20 = r.at(2, 0).clamp(-1.0, 1.0);
    let pitch = (-r20).asin();
    let (yaw, roll) = if r20.abs() > 1.0 - GIMBAL_TOL {
        ((-r.at(0, 1)).atan2(r.at(1, 1)), 0.0)
    } else {
        (r.at(1, 0).atan2(r.at(0, 0)), r.at(2, 1).atan2(r.at(2, 2)))
    };
    Ok(EulerAngles {
        yaw: wrap(yaw),
        pitch,
        roll: wrap(roll),
    })
}

/// `θ = W_out·vec(B) + b_out` on plain values, with `W_out` 3×9 row-major.
pub fn regress_angles_value(b: &RotationMatrix, w_out: &[f64], b_out: &[f64; 3]) -> Result<EulerAngles> {
    if w_out.len() != 27 {
        return Err(CoreError::Dim(format!("W_out needs 3×9 entries, got {}", w_out.len())));
    }
    let v = b.vec();
    let out: Vec<f64> = (0..3)
        .map(|i| (0..9).map(|j| w_out[i * 9 + j] * v[j]).sum::<f64>() + b_out[i])
        .collect();
    Ok(EulerAngles::new(out[0], out[1], out[2]))
}

// ---- differentiable branch ----------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadPoseConfig {
    /// Length of the raw head feature vector.
    pub input_dim: usize,
    pub hidden: usize,
    /// Width of the backbone feature `F_h` fed to the 6D map.
    pub feature_dim: usize,
}

impl Default for HeadPoseConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden: 32,
            feature_dim: 32,
        }
    }
}

pub fn init_params<R: Rng>(params: &mut ParameterSet, rng: &mut R, cfg: &HeadPoseConfig) -> Result<()> {
    insert_linear(params, rng, "head.mlp1", cfg.input_dim, cfg.hidden)?;
    insert_linear(params, rng, "head.mlp2", cfg.hidden, cfg.feature_dim)?;
    params.insert("head.to6d.w", init::normal(rng, &[cfg.feature_dim, 6], 0.1))?;
    // Start near a1 = e1, a2 = e2 so early frames stay far from degeneracy.
    params.insert("head.to6d.b", Tensor::vector(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]))?;
    insert_linear(params, rng, "head.out", 9, 3)?;
    Ok(())
}

/// Backbone perceptron: `F_h = tanh(W2·tanh(W1·x + b1) + b2)`.
pub fn backbone(g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var> {
    let h = linear(g, params, "head.mlp1", x)?;
    let h = g.tanh(h)?;
    let h = linear(g, params, "head.mlp2", h)?;
    Ok(g.tanh(h)?)
}

/// Affine map `N_f → 6` per row; columns 0..3 are `a1`, 3..6 are `a2`.
pub fn head_to_6d(g: &mut Graph, params: &ParameterSet, f: Var) -> Result<Var> {
    let w = params.value("head.to6d.w")?;
    let (_, cols) = g.value(f).dims2()?;
    if cols != w.shape()[0] {
        return Err(CoreError::Dim(format!(
            "head feature width {cols} vs 6D map input {}",
            w.shape()[0]
        )));
    }
    linear(g, params, "head.to6d", f)
}

/// Rowwise Gram-Schmidt: `T×6` to `T×9` holding `vec(B) = [b1, b2, b3]`.
pub fn gram_schmidt_graph(g: &mut Graph, a: Var) -> Result<Var> {
    let (rows, cols) = g.value(a).dims2()?;
    if cols != 6 {
        return Err(CoreError::Dim(format!("6D input has {cols} columns")));
    }
    // Same degeneracy test as the value path, reported per row.
    for r in 0..rows {
        gram_schmidt_row(&Rotation6D::from_slice(g.value(a).row(r))?, r)?;
    }
    let a1 = g.slice_cols(a, 0, 3)?;
    let a2 = g.slice_cols(a, 3, 6)?;
    let b1 = unit_rows(g, a1)?;
    let prod = g.mul(b1, a2)?;
    let d = g.sum_last(prod)?;
    let proj = g.mul_col(b1, d)?;
    let u2 = g.sub(a2, proj)?;
    let b2 = unit_rows(g, u2)?;
    let b3 = g.cross3(b1, b2)?;
    Ok(g.concat_cols(&[b1, b2, b3])?)
}

fn unit_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.square(x)?;
    let s = g.sum_last(sq)?;
    let n = g.sqrt(s)?;
    let inv = g.recip(n)?;
    Ok(g.mul_col(x, inv)?)
}

/// `θ = W_out·vec(B) + b_out`, rowwise. Output columns are yaw, pitch, roll.
pub fn regress_angles(g: &mut Graph, params: &ParameterSet, b: Var) -> Result<Var> {
    let (_, cols) = g.value(b).dims2()?;
    if cols != 9 {
        return Err(CoreError::Dim(format!("vec(B) has {cols} columns, expected 9")));
    }
    linear(g, params, "head.out", b)
}

/// Full chain from normalized head features (`T×input_dim`) to `z_h` (`T×3`).
pub fn head_branch(g: &mut Graph, params: &ParameterSet, features: Var) -> Result<Var> {
    let f = backbone(g, params, features)?;
    let a = head_to_6d(g, params, f)?;
    let b = gram_schmidt_graph(g, a)?;
    regress_angles(g, params, b)
}
