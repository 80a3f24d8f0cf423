//! Tri-modal fusion: stream adapters, pairwise cross-attention (head queries
//! lip, lip queries audio, audio queries head), additive aggregation, prompt
//! concatenation, one self-attention layer and a per-frame sigmoid classifier.

use numkit::{Graph, ParameterSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{insert_linear, linear};

/// Bound applied to scores before the focal loss.
pub const SCORE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Model width `D_m`; the prompt has the same width.
    pub dim: usize,
    pub heads: usize,
    /// Stacked cross-attention rounds.
    pub layers: usize,
    pub self_heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 8,
            layers: 2,
            self_heads: 8,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(CoreError::Config(format!("fusion width {} must be even and positive", self.dim)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "fusion width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.self_heads == 0 || (2 * self.dim) % self.self_heads != 0 {
            return Err(CoreError::Config(format!(
                "self-attention width {} not divisible by {} heads",
                2 * self.dim,
                self.self_heads
            )));
        }
        Ok(())
    }
}

/// The three cross-attention pairings as `(name, query stream, key/value stream)`.
pub const PAIRS: [(&str, usize, usize); 3] = [("hl", 0, 1), ("la", 1, 2), ("ah", 2, 0)];

pub fn init_params<R: Rng>(
    params: &mut ParameterSet,
    rng: &mut R,
    cfg: &FusionConfig,
    head_in: usize,
    lip_in: usize,
    audio_in: usize,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    insert_linear(params, rng, "fuse.proj_h", head_in, d)?;
    insert_linear(params, rng, "fuse.proj_l", lip_in, d)?;
    insert_linear(params, rng, "fuse.proj_a", audio_in, d)?;
    for l in 0..cfg.layers {
        for (pair, _, _) in PAIRS {
            insert_cross_attention(params, rng, &format!("fuse.l{l}.{pair}"), d)?;
        }
    }
    insert_cross_attention(params, rng, "fuse.self", 2 * d)?;
    insert_linear(params, rng, "fuse.cls", 2 * d, 1)?;
    Ok(())
}

pub fn insert_cross_attention<R: Rng>(params: &mut ParameterSet, rng: &mut R, prefix: &str, dim: usize) -> Result<()> {
    for proj in ["q", "k", "v"] {
        insert_linear(params, rng, &format!("{prefix}.{proj}"), dim, dim)?;
    }
    Ok(())
}

/// `q + softmax(Q Kᵀ/√d_k) V` with `Q = W_q·q`, `K = W_k·kv`, `V = W_v·kv`.
/// Every query frame attends over all frames of `kv`.
pub fn cross_attention(g: &mut Graph, params: &ParameterSet, prefix: &str, q: Var, kv: Var, heads: usize) -> Result<Var> {
    let (tq, dq) = g.value(q).dims2()?;
    let (tk, dk) = g.value(kv).dims2()?;
    if tq != tk || dq != dk {
        return Err(CoreError::Dim(format!("cross-attention between {tq}×{dq} and {tk}×{dk}")));
    }
    if heads == 0 || dq % heads != 0 {
        return Err(CoreError::Config(format!("attention width {dq} not divisible by {heads} heads")));
    }
    let qp = linear(g, params, &format!("{prefix}.q"), q)?;
    let kp = linear(g, params, &format!("{prefix}.k"), kv)?;
    let vp = linear(g, params, &format!("{prefix}.v"), kv)?;
    let a = g.attention(qp, kp, vp, heads, 1)?;
    Ok(g.add(q, a)?)
}

/// `z_hla = z_hl + z_la + z_ah`.
pub fn aggregate(g: &mut Graph, z_hl: Var, z_la: Var, z_ah: Var) -> Result<Var> {
    if g.shape(z_hl) != g.shape(z_la) || g.shape(z_la) != g.shape(z_ah) {
        return Err(CoreError::Dim(format!(
            "aggregate of {:?}, {:?}, {:?}",
            g.shape(z_hl),
            g.shape(z_la),
            g.shape(z_ah)
        )));
    }
    let s = g.add(z_hl, z_la)?;
    Ok(g.add(s, z_ah)?)
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub z_hl: Var,
    pub z_la: Var,
    pub z_ah: Var,
    pub z_hla: Var,
    pub logits: Var,
    /// `T×1` probabilities.
    pub scores: Var,
}

/// Projects `z_h` (`T×3`), `z_l` and `z_a` to width `D_m` and runs the fusion
/// stack with `prompt` (`T×D_m`).
pub fn fuse_forward(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &FusionConfig,
    z_h: Var,
    z_l: Var,
    z_a: Var,
    prompt: Var,
) -> Result<FusionOutput> {
    cfg.validate()?;
    let t = g.value(z_h).dims2()?.0;
    for (name, v) in [("lip", z_l), ("audio", z_a), ("prompt", prompt)] {
        let rows = g.value(v).dims2()?.0;
        if rows != t {
            return Err(CoreError::Dim(format!("{name} stream has {rows} frames, head stream {t}")));
        }
    }
    let pw = g.value(prompt).dims2()?.1;
    if pw != cfg.dim {
        return Err(CoreError::Dim(format!("prompt width {pw} vs fusion width {}", cfg.dim)));
    }
    let mut streams = [
        linear(g, params, "fuse.proj_h", z_h)?,
        linear(g, params, "fuse.proj_l", z_l)?,
        linear(g, params, "fuse.proj_a", z_a)?,
    ];
    for l in 0..cfg.layers {
        let mut next = streams;
        for (k, (pair, qi, ki)) in PAIRS.iter().enumerate() {
            next[k] = cross_attention(g, params, &format!("fuse.l{l}.{pair}"), streams[*qi], streams[*ki], cfg.heads)?;
        }
        streams = next;
    }
    let [z_hl, z_la, z_ah] = streams;
    let z_hla = aggregate(g, z_hl, z_la, z_ah)?;
    let cat = g.concat_cols(&[z_hla, prompt])?;
    let s = cross_attention(g, params, "fuse.self", cat, cat, cfg.self_heads)?;
    let logits = linear(g, params, "fuse.cls", s)?;
    let scores = g.sigmoid(logits)?;
    Ok(FusionOutput {
        z_hl,
        z_la,
        z_ah,
        z_hla,
        logits,
        scores,
    })
}

/// Mean over frames of `−α_t (1 − p_t)^γ ln p_t`, scores clamped to
/// `[1e-7, 1 − 1e-7]` first.
pub fn focal_loss(g: &mut Graph, scores: Var, labels: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
    let n = g.value(scores).len();
    if labels.len() != n {
        return Err(CoreError::Dim(format!("{n} scores vs {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(CoreError::Data(format!("label {bad} is not 0 or 1")));
    }
    let shape = g.shape(scores).to_vec();
    let p = g.clamp(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)?;
    let sign = g.constant(Tensor::new(shape.clone(), labels.iter().map(|y| 2.0 * y - 1.0).collect())?);
    let offset = g.constant(Tensor::new(shape.clone(), labels.iter().map(|y| 1.0 - y).collect())?);
    let weight = g.constant(Tensor::new(
        shape,
        labels.iter().map(|&y| if y == 1.0 { -alpha } else { -(1.0 - alpha) }).collect(),
    )?);
    let pt = g.mul(p, sign)?;
    let pt = g.add(pt, offset)?;
    let q = g.scale(pt, -1.0)?;
    let q = g.add_scalar(q, 1.0)?;
    let modulating = g.powf(q, gamma)?;
    let log_pt = g.ln(pt)?;
    let fl = g.mul(modulating, log_pt)?;
    let fl = g.mul(fl, weight)?;
    Ok(g.mean(fl)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(p: &[f64], y: &[f64], alpha: f64, gamma: f64) -> f64 {
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(vec![p.len(), 1], p.to_vec()).unwrap());
        let l = focal_loss(&mut g, s, y, alpha, gamma).unwrap();
        g.value(l).item()
    }

    #[test]
    fn focal_examples() {
        let l = loss_of(&[0.5], &[1.0], 0.25, 2.0);
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.0433217).abs() < 1e-7);
        assert!(loss_of(&[1.0, 0.0], &[1.0, 0.0], 0.25, 2.0) < 1e-14);
    }

    #[test]
    fn focal_rejects_soft_labels() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(vec![1, 1], vec![0.3]).unwrap());
        assert!(matches!(focal_loss(&mut g, s, &[0.5], 0.25, 2.0), Err(CoreError::Data(_))));
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig { dim: 6, heads: 4, ..FusionConfig::default() }.validate().is_err());
        assert!(FusionConfig { dim: 5, heads: 1, self_heads: 1, ..FusionConfig::default() }.validate().is_err());
        assert!(FusionConfig::default().validate().is_ok());
    }
}
