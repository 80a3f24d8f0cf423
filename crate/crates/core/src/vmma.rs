//! Missing-modality prompts built from head-crop presence.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Per-frame head-crop presence of one sequence; `true` means present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PresenceMask(Vec<bool>);

impl PresenceMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn all_present(frames: usize) -> Self {
        Self(vec![true; frames])
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn missing(&self) -> usize {
        self.0.iter().filter(|&&b| !b).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Fine,
    Coarse,
}

/// `T × D` binary prompt for one sequence, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VmmaPrompt {
    pub frames: usize,
    pub dim: usize,
    pub mode: PromptMode,
    pub values: Vec<f64>,
}

impl VmmaPrompt {
    pub fn zeros(frames: usize, dim: usize, mode: PromptMode) -> Self {
        Self {
            frames,
            dim,
            mode,
            values: vec![0.0; frames * dim],
        }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }
}

/// Every entry of frame `t` is 1 when the head crop is missing, else 0.
pub fn fine_grained_prompt(mask: &PresenceMask, dim: usize) -> Result<VmmaPrompt> {
    if dim == 0 {
        return Err(CoreError::Config("prompt width must be at least 1".into()));
    }
    let values = mask
        .bits()
        .iter()
        .flat_map(|&present| std::iter::repeat_n(if present { 0.0 } else { 1.0 }, dim))
        .collect();
    Ok(VmmaPrompt {
        frames: mask.len(),
        dim,
        mode: PromptMode::Fine,
        values,
    })
}

/// `Δ_c = T_miss / T`.
pub fn missing_ratio(mask: &PresenceMask) -> Result<f64> {
    if mask.is_empty() {
        return Err(CoreError::Contract("missing ratio of an empty mask".into()));
    }
    Ok(mask.missing() as f64 / mask.len() as f64)
}

/// One prompt row: with 1-indexed `d`, entries `d ≤ D/2` are 1 when
/// `Δ_c < β`, entries `d > D/2` are 1 when `Δ_c ≥ β`.
pub fn coarse_grained_row(delta: f64, beta: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(CoreError::Config(format!("coarse prompt width {dim} must be even and positive")));
    }
    let low = delta < beta;
    Ok((1..=dim)
        .map(|d| {
            let first_half = d <= dim / 2;
            if first_half == low {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

/// The coarse row broadcast over `frames`.
pub fn coarse_grained_prompt(delta: f64, beta: f64, dim: usize, frames: usize) -> Result<VmmaPrompt> {
    let row = coarse_grained_row(delta, beta, dim)?;
    let values = (0..frames).flat_map(|_| row.iter().copied()).collect();
    Ok(VmmaPrompt {
        frames,
        dim,
        mode: PromptMode::Coarse,
        values,
    })
}

/// Population mean plus `k` population standard deviations, clamped to `[0, 1]`.
pub fn adaptive_threshold(history: &[f64], k: f64) -> Result<f64> {
    if history.is_empty() {
        return Err(CoreError::Contract("adaptive threshold needs a non-empty history".into()));
    }
    Ok(unclamped_threshold(history, k).clamp(0.0, 1.0))
}

fn unclamped_threshold(history: &[f64], k: f64) -> f64 {
    let n = history.len() as f64;
    let mean = history.iter().sum::<f64>() / n;
    let var = history.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    mean + k * var.sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaPolicy {
    Adaptive { k: f64 },
    Fixed { beta: f64 },
}

impl Default for BetaPolicy {
    fn default() -> Self {
        BetaPolicy::Adaptive { k: 0.0 }
    }
}

/// Frozen `β_T` together with the history it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdState {
    pub beta: f64,
    pub k: f64,
    pub history: Vec<f64>,
}

impl ThresholdState {
    pub fn from_policy(policy: BetaPolicy, history: Vec<f64>) -> Result<Self> {
        match policy {
            BetaPolicy::Adaptive { k } => Ok(Self {
                beta: adaptive_threshold(&history, k)?,
                k,
                history,
            }),
            BetaPolicy::Fixed { beta } => {
                if !(0.0..=1.0).contains(&beta) {
                    return Err(CoreError::Config(format!("fixed threshold {beta} outside [0, 1]")));
                }
                Ok(Self { beta, k: 0.0, history })
            }
        }
    }
}
