//! Run configuration: named presets, TOML overlays and a stable hash.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::evalkit::{default_snr_grid, Experiment, Grouping};
use crate::fusion::FusionConfig;
use crate::headpose::HeadPoseConfig;
use crate::lipenc::LipConfig;
use crate::model::{ModelConfig, VmmaConfig};
use crate::psa::{AudioConfig, MelConfig};
use crate::scenario::{NoiseKind, ScenarioConfig};
use crate::train::TrainConfig;
use crate::vmma::{BetaPolicy, PromptMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seeds for multi-seed experiments.
    pub seeds: Vec<u64>,
    /// SNR levels in dB for sweeps.
    pub snr_grid: Vec<f64>,
    /// Also evaluate on clean audio after the grid.
    pub include_clean: bool,
    pub sweep_noise: NoiseKind,
    pub grouping: Grouping,
    /// Multiplier of the adaptive threshold used by the threshold study.
    pub threshold_k: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            snr_grid: default_snr_grid().into_iter().flatten().collect(),
            include_clean: true,
            sweep_noise: NoiseKind::Mixed,
            grouping: Grouping::Global,
            threshold_k: 0.0,
        }
    }
}

impl EvalConfig {
    pub fn grid(&self) -> Vec<Option<f64>> {
        let mut g: Vec<Option<f64>> = self.snr_grid.iter().map(|&d| Some(d)).collect();
        if self.include_clean {
            g.push(None);
        }
        g
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Root for run directories; falls back to the environment, then `runs`.
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

pub const PRESETS: [&str; 3] = ["default", "bench", "tiny"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "bench" => Ok(Self::bench()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(CoreError::Config(format!(
                "unknown preset `{name}`, expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Sized so that one model trains in well under a minute on one core.
    pub fn bench() -> Self {
        let scenario = ScenarioConfig {
            frames: 48,
            head_dim: 16,
            lip_height: 16,
            lip_width: 16,
            train: 160,
            val: 48,
            test: 96,
            ..ScenarioConfig::default()
        };
        let model = ModelConfig {
            head: HeadPoseConfig {
                input_dim: 16,
                hidden: 16,
                feature_dim: 16,
            },
            lip: LipConfig {
                height: 16,
                width: 16,
                channels: 1,
                patch: 8,
                dim: 16,
                heads: 2,
                layers: 1,
                max_patches: 16,
                ffn_mult: 2,
            },
            audio: AudioConfig {
                n_mels: 40,
                channels: 16,
                dim: 16,
                ..AudioConfig::default()
            },
            mel: MelConfig {
                n_mels: 40,
                ..MelConfig::default()
            },
            fusion: FusionConfig {
                dim: 16,
                heads: 2,
                layers: 1,
                self_heads: 2,
            },
            vmma: VmmaConfig {
                mode: PromptMode::Fine,
                beta: BetaPolicy::default(),
            },
        };
        let train = TrainConfig {
            lr: 1e-3,
            epochs: 30,
            lambda_psa: 2e-3,
            ..TrainConfig::default()
        };
        Self {
            scenario,
            model,
            train,
            ..Self::default()
        }
    }

    /// Smallest configuration that exercises every code path; used for
    /// gradient checks and overfitting.
    pub fn tiny() -> Self {
        let scenario = ScenarioConfig {
            frames: 12,
            head_dim: 6,
            lip_height: 8,
            lip_width: 8,
            train: 4,
            val: 2,
            test: 2,
            ..ScenarioConfig::default()
        };
        let model = ModelConfig {
            head: HeadPoseConfig {
                input_dim: 6,
                hidden: 5,
                feature_dim: 4,
            },
            lip: LipConfig {
                height: 8,
                width: 8,
                channels: 1,
                patch: 4,
                dim: 8,
                heads: 2,
                layers: 1,
                max_patches: 4,
                ffn_mult: 2,
            },
            audio: AudioConfig {
                n_mels: 12,
                channels: 4,
                dim: 6,
                ..AudioConfig::default()
            },
            mel: MelConfig {
                n_mels: 12,
                ..MelConfig::default()
            },
            fusion: FusionConfig {
                dim: 8,
                heads: 2,
                layers: 1,
                self_heads: 2,
            },
            vmma: VmmaConfig {
                mode: PromptMode::Coarse,
                beta: BetaPolicy::Fixed { beta: 0.2 },
            },
        };
        let train = TrainConfig {
            lr: 1e-2,
            epochs: 2,
            ..TrainConfig::default()
        };
        Self {
            scenario,
            model,
            train,
            eval: EvalConfig {
                seeds: vec![0],
                ..EvalConfig::default()
            },
            ..Self::default()
        }
    }

    /// `preset` overlaid with the keys present in `toml_text`.
    pub fn load(preset: &str, toml_text: Option<&str>) -> Result<Self> {
        let base = Self::preset(preset)?;
        let Some(text) = toml_text else {
            return Ok(base);
        };
        let overlay: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CoreError::Config(format!("config file: {}", e.message())))?;
        let mut tree = toml::Table::try_from(&base).map_err(|e| CoreError::Config(e.to_string()))?;
        merge(&mut tree, overlay);
        toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| CoreError::Config(format!("config file: {}", e.message())))
    }

    /// Sets a dotted key such as `train.lr` from a TOML literal; bare words
    /// are taken as strings.
    pub fn set(&mut self, key: &str, literal: &str) -> Result<()> {
        let value: toml::Value = match format!("v = {literal}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("key parsed"),
            Err(_) => toml::Value::String(literal.to_string()),
        };
        let mut overlay = toml::Table::new();
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CoreError::Config(format!("empty key `{key}`")))?;
        let mut leaf = toml::Table::new();
        leaf.insert(last.to_string(), value);
        let nested = parts.iter().rev().fold(leaf, |inner, p| {
            let mut t = toml::Table::new();
            t.insert(p.to_string(), toml::Value::Table(inner));
            t
        });
        overlay.extend(nested);
        let mut tree = toml::Table::try_from(&*self).map_err(|e| CoreError::Config(e.to_string()))?;
        merge(&mut tree, overlay);
        *self = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| CoreError::Config(format!("`{key}`: {}", e.message())))?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoreError::Config(e.to_string()))
    }

    /// First 12 hex digits of the SHA-256 of the canonical TOML.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
    }

    /// Scenario with the run seed applied.
    pub fn seeded_scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            seed: self.seed,
            ..self.scenario.clone()
        }
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            scenario: self.scenario.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            grouping: self.eval.grouping,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment().validate()?;
        if self.eval.seeds.is_empty() {
            return Err(CoreError::Config("eval.seeds must list at least one seed".into()));
        }
        if self.eval.snr_grid.iter().any(|d| !d.is_finite()) {
            return Err(CoreError::Config("eval.snr_grid values must be finite".into()));
        }
        Ok(())
    }
}

/// Recursive overlay. A table carrying a `kind` tag selects an enum variant
/// and replaces the base table outright.
fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("kind") => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in PRESETS {
            RunConfig::preset(p).unwrap().validate().unwrap();
        }
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn toml_round_trip() {
        for p in PRESETS {
            let c = RunConfig::preset(p).unwrap();
            let text = c.to_toml().unwrap();
            assert_eq!(RunConfig::load("default", Some(&text)).unwrap(), c);
        }
    }

    #[test]
    fn overlay_and_set() {
        let c = RunConfig::load("bench", Some("seed = 9\n[train]\nlr = 0.5\n")).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.train.epochs, RunConfig::bench().train.epochs);
        let mut c = c;
        c.set("scenario.frames", "12").unwrap();
        c.set("eval.sweep_noise", "pink").unwrap();
        assert_eq!(c.scenario.frames, 12);
        assert_eq!(c.eval.sweep_noise, NoiseKind::Pink);
        assert!(c.set("train.nope", "1").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::load("default", Some("bogus = 1")).is_err());
        assert!(RunConfig::load("default", Some("[model.fusion]\nwidth = 3")).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.train.lr = 3e-4;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 12);
    }
}
