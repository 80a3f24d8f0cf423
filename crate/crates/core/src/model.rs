//! The end-to-end detector: head, lip and audio branches feeding fusion,
//! plus the ablation switches that replace or remove parts of it.

use numkit::{Graph, ParameterSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result, ResultExt};
use crate::fusion::{self, FusionConfig, FusionOutput};
use crate::headpose::{self, HeadPoseConfig, NormStats};
use crate::lipenc::{self, LipConfig, LipImage};
use crate::nn::{insert_linear, linear};
use crate::psa::{self, AudioConfig, MelConfig, MelFrontEnd, Waveform};
use crate::rng::derive_seed;
use crate::scenario::{ScenarioConfig, ScenarioDataset, Sequence};
use crate::vmma::{self, BetaPolicy, PromptMode, ThresholdState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmmaConfig {
    pub mode: PromptMode,
    pub beta: BetaPolicy,
}

impl Default for VmmaConfig {
    fn default() -> Self {
        Self {
            mode: PromptMode::Coarse,
            beta: BetaPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub head: HeadPoseConfig,
    pub lip: LipConfig,
    pub audio: AudioConfig,
    pub mel: MelConfig,
    pub fusion: FusionConfig,
    pub vmma: VmmaConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.lip.validate()?;
        self.fusion.validate()?;
        MelFrontEnd::new(self.mel.clone())?;
        if self.audio.n_mels != self.mel.n_mels {
            return Err(CoreError::Config(format!(
                "audio encoder expects {} bands, front end makes {}",
                self.audio.n_mels, self.mel.n_mels
            )));
        }
        if !(self.audio.input_scale > 0.0) {
            return Err(CoreError::Config("audio input scale must be positive".into()));
        }
        if self.head.input_dim == 0 || self.head.hidden == 0 || self.head.feature_dim == 0 {
            return Err(CoreError::Config("head branch widths must be positive".into()));
        }
        if self.audio.channels == 0 || self.audio.dim == 0 {
            return Err(CoreError::Config("audio encoder widths must be positive".into()));
        }
        if let BetaPolicy::Fixed { beta } = self.vmma.beta {
            if !(0.0..=1.0).contains(&beta) {
                return Err(CoreError::Config(format!("fixed threshold {beta} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Checks that the model can consume data generated with `sc`.
    pub fn check_scenario(&self, sc: &ScenarioConfig) -> Result<()> {
        if self.head.input_dim != sc.head_dim {
            return Err(CoreError::Config(format!(
                "head branch input {} vs generated head features {}",
                self.head.input_dim, sc.head_dim
            )));
        }
        if (self.lip.height, self.lip.width, self.lip.channels) != (sc.lip_height, sc.lip_width, sc.lip_channels) {
            return Err(CoreError::Config(format!(
                "lip encoder expects {}×{}×{}, generator draws {}×{}×{}",
                self.lip.height, self.lip.width, self.lip.channels, sc.lip_height, sc.lip_width, sc.lip_channels
            )));
        }
        if self.mel.sample_rate != sc.sample_rate {
            return Err(CoreError::Config(format!(
                "front end at {} Hz, audio generated at {} Hz",
                self.mel.sample_rate, sc.sample_rate
            )));
        }
        if psa::conv_frames(self.mel.frame_count(sc.samples_per_sequence())) == 0 {
            return Err(CoreError::Config("sequences too short for the audio encoder".into()));
        }
        Ok(())
    }
}

/// Which input streams reach fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamSet {
    All,
    /// Head and lip streams are replaced by zeros.
    AudioOnly,
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    /// Rotation-based head branch and patch transformer; off uses single
    /// linear layers over raw head features and flattened lip pixels.
    pub vstr: bool,
    /// Noise mixing and the consistency loss during training.
    pub psa: bool,
    /// Missing-modality prompt; off feeds an all-zero prompt.
    pub vmma: bool,
    pub streams: StreamSet,
}

impl Variant {
    pub const FULL: Variant = Variant {
        vstr: true,
        psa: true,
        vmma: true,
        streams: StreamSet::All,
    };

    pub const AUDIO_ONLY: Variant = Variant {
        vstr: true,
        psa: true,
        vmma: false,
        streams: StreamSet::AudioOnly,
    };

    pub fn toggles(vstr: bool, psa: bool, vmma: bool) -> Self {
        Variant {
            vstr,
            psa,
            vmma,
            streams: StreamSet::All,
        }
    }

    /// The eight toggle combinations, all-off first.
    pub fn grid() -> Vec<Variant> {
        let mut out = Vec::with_capacity(8);
        for vstr in [false, true] {
            for psa in [false, true] {
                for vmma in [false, true] {
                    out.push(Variant::toggles(vstr, psa, vmma));
                }
            }
        }
        out
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.streams == StreamSet::AudioOnly {
            parts.push("audio-only");
        }
        for (on, n) in [(self.vstr, "vstr"), (self.psa, "psa"), (self.vmma, "vmma")] {
            if on {
                parts.push(n);
            }
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

/// One sequence converted into model inputs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: u32,
    pub frames: usize,
    /// `T × head_dim` normalized features, zero rows where missing.
    pub head: Tensor,
    /// Raw lip pixels, `T × H × W × C`.
    pub lip: Vec<u8>,
    pub clean: Waveform,
    /// Encoder input built from the clean waveform.
    pub mel: Tensor,
    pub pool: Tensor,
    /// `T × D_m` prompt.
    pub prompt: Tensor,
    pub labels: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TtmModel {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub params: ParameterSet,
    pub head_stats: NormStats,
    pub threshold: ThresholdState,
    pub fps: f64,
}

impl TtmModel {
    /// Fresh parameters from `seed`; normalization statistics and the
    /// missing-ratio history come from the training split.
    pub fn new(cfg: ModelConfig, variant: Variant, train: &ScenarioDataset, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(CoreError::Data("training split is empty".into()));
        }
        if cfg.head.input_dim != train.head_dim {
            return Err(CoreError::Config(format!(
                "head branch input {} vs dataset head features {}",
                cfg.head.input_dim, train.head_dim
            )));
        }
        let head_stats = head_stats(train)?;
        let history = train
            .sequences
            .iter()
            .map(|s| vmma::missing_ratio(&s.presence()))
            .collect::<Result<Vec<_>>>()?;
        let threshold = ThresholdState::from_policy(cfg.vmma.beta, history)?;
        let params = init_params(&cfg, variant, seed)?;
        Ok(Self {
            cfg,
            variant,
            params,
            head_stats,
            threshold,
            fps: train.fps as f64,
        })
    }

    pub fn front_end(&self) -> Result<MelFrontEnd> {
        MelFrontEnd::new(self.cfg.mel.clone())
    }

    pub fn prepare(&self, ds: &ScenarioDataset) -> Result<Vec<Prepared>> {
        let fe = self.front_end()?;
        ds.sequences.iter().map(|s| self.prepare_one(&fe, s)).collect()
    }

    pub fn prepare_one(&self, fe: &MelFrontEnd, s: &Sequence) -> Result<Prepared> {
        let t = s.frames();
        let d = self.head_stats.dim();
        if s.head.len() != t * d {
            return Err(CoreError::Dim(format!("sequence {} head features {} vs {t}×{d}", s.id, s.head.len())));
        }
        let mut head = vec![0.0; t * d];
        let raw: Vec<f64> = s.head.iter().map(|&v| v as f64).collect();
        for f in 0..t {
            if s.mask[f] {
                self.head_stats.normalize_slice(&raw[f * d..(f + 1) * d], &mut head[f * d..(f + 1) * d]);
            }
        }
        if s.lip.len() != t * self.cfg.lip.pixels() {
            return Err(CoreError::Dim(format!(
                "sequence {} lip bytes {} vs {t} frames of {}",
                s.id,
                s.lip.len(),
                self.cfg.lip.pixels()
            )));
        }
        let clean = s.waveform()?;
        let spec = fe.compute(&clean)?;
        let mel = psa::mel_input(&spec, &self.cfg.audio)?;
        let pool = psa::pooling_matrix(&self.cfg.mel, spec.frames, self.fps, t)?;
        let prompt = self.prompt(s)?;
        Ok(Prepared {
            id: s.id,
            frames: t,
            head: Tensor::new(vec![t, d], head)?,
            lip: s.lip.clone(),
            clean,
            mel,
            pool,
            prompt,
            labels: s.labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect(),
        })
    }

    fn prompt(&self, s: &Sequence) -> Result<Tensor> {
        let (t, d) = (s.frames(), self.cfg.fusion.dim);
        if !self.variant.vmma || self.variant.streams == StreamSet::AudioOnly {
            return Ok(Tensor::zeros(&[t, d]));
        }
        let mask = s.presence();
        let p = match self.cfg.vmma.mode {
            PromptMode::Fine => vmma::fine_grained_prompt(&mask, d)?,
            PromptMode::Coarse => {
                vmma::coarse_grained_prompt(vmma::missing_ratio(&mask)?, self.threshold.beta, d, t)?
            }
        };
        Ok(Tensor::new(vec![t, d], p.values)?)
    }

    /// Encoder input for an arbitrary waveform of the same length.
    pub fn mel_of(&self, fe: &MelFrontEnd, w: &Waveform) -> Result<Tensor> {
        psa::mel_input(&fe.compute(w)?, &self.cfg.audio)
    }

    fn lip_input(&self, s: &Prepared) -> Result<Tensor> {
        let c = &self.cfg.lip;
        let px = c.pixels();
        if self.variant.vstr {
            let mut data = Vec::with_capacity(s.frames * px);
            for f in 0..s.frames {
                let img = LipImage::from_u8(c.height, c.width, c.channels, &s.lip[f * px..(f + 1) * px])?;
                data.extend(lipenc::patchify(&img, c.patch)?.into_data());
            }
            Ok(Tensor::new(vec![s.frames * c.num_patches(), c.patch_len()], data)?)
        } else {
            Ok(Tensor::new(
                vec![s.frames, px],
                s.lip.iter().map(|&b| b as f64 / 255.0).collect(),
            )?)
        }
    }

    /// Head and lip streams (`T×3`, `T×D_lip`).
    fn visual(&self, g: &mut Graph, params: &ParameterSet, s: &Prepared) -> Result<(Var, Var)> {
        let t = s.frames;
        if self.variant.streams == StreamSet::AudioOnly {
            let zh = g.constant(Tensor::zeros(&[t, 3]));
            let zl = g.constant(Tensor::zeros(&[t, self.cfg.lip.dim]));
            return Ok((zh, zl));
        }
        let head = g.constant(s.head.clone());
        let lip = g.constant(self.lip_input(s)?);
        if self.variant.vstr {
            let zh = headpose::head_branch(g, params, head).within("headpose")?;
            let zl = lipenc::lip_branch(g, params, &self.cfg.lip, lip, t).within("lipenc")?;
            Ok((zh, zl))
        } else {
            let zh = linear(g, params, "base.head", head)?;
            let zl = linear(g, params, "base.lip", lip)?;
            Ok((zh, zl))
        }
    }

    fn fuse(&self, g: &mut Graph, params: &ParameterSet, s: &Prepared, zh: Var, zl: Var, za: Var) -> Result<FusionOutput> {
        let prompt = g.constant(s.prompt.clone());
        fusion::fuse_forward(g, params, &self.cfg.fusion, zh, zl, za, prompt).within("fusion")
    }

    /// Scores (`T×1`) with `mel` as the audio input.
    pub fn forward(&self, g: &mut Graph, s: &Prepared, mel: &Tensor) -> Result<FusionOutput> {
        self.forward_with(g, &self.params, s, mel)
    }

    /// [`forward`](Self::forward) with an explicit parameter set.
    pub fn forward_with(&self, g: &mut Graph, params: &ParameterSet, s: &Prepared, mel: &Tensor) -> Result<FusionOutput> {
        let (zh, zl) = self.visual(g, params, s)?;
        let m = g.constant(mel.clone());
        let pool = g.constant(s.pool.clone());
        let za = psa::audio_encoder(g, params, m, pool).within("psa")?;
        self.fuse(g, params, s, zh, zl, za)
    }

    /// Dual-path pass: the shared encoder sees the clean and the mixed
    /// spectrogram, fusion consumes the mixed path. Returns the fusion output
    /// and the consistency loss.
    pub fn forward_mixed(&self, g: &mut Graph, s: &Prepared, mixed: &Tensor) -> Result<(FusionOutput, Var)> {
        self.forward_mixed_with(g, &self.params, s, mixed)
    }

    pub fn forward_mixed_with(&self, g: &mut Graph, params: &ParameterSet, s: &Prepared, mixed: &Tensor) -> Result<(FusionOutput, Var)> {
        let (zh, zl) = self.visual(g, params, s)?;
        let s_a = g.constant(s.mel.clone());
        let s_m = g.constant(mixed.clone());
        let pool = g.constant(s.pool.clone());
        let (z_a, z_m) = psa::psa_forward(g, params, s_a, s_m, pool).within("psa")?;
        let mse = psa::consistency_loss(g, z_a, z_m)?;
        Ok((self.fuse(g, params, s, zh, zl, z_m)?, mse))
    }

    /// Per-frame scores for `s`, using `mel` in place of the clean audio
    /// when given.
    pub fn predict(&self, s: &Prepared, mel: Option<&Tensor>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, s, mel.unwrap_or(&s.mel))?;
        Ok(g.value(out.scores).data().to_vec())
    }
}

/// Statistics over the present frames of the training split.
pub fn head_stats(train: &ScenarioDataset) -> Result<NormStats> {
    let d = train.head_dim;
    let rows: Vec<Vec<f64>> = train
        .sequences
        .iter()
        .flat_map(|s| {
            (0..s.frames())
                .filter(|&t| s.mask[t])
                .map(move |t| s.head[t * d..(t + 1) * d].iter().map(|&v| v as f64).collect())
        })
        .collect();
    if rows.is_empty() {
        // every head crop missing: inputs are all zero anyway
        return NormStats::new(vec![0.0; d], vec![1.0; d]);
    }
    NormStats::from_rows(rows.iter().map(|r| r.as_slice()))
}

pub fn init_params(cfg: &ModelConfig, variant: Variant, seed: u64) -> Result<ParameterSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[crate::rng::tag("init")]));
    let mut params = ParameterSet::new();
    if variant.streams == StreamSet::All {
        if variant.vstr {
            headpose::init_params(&mut params, &mut rng, &cfg.head)?;
            lipenc::init_params(&mut params, &mut rng, &cfg.lip)?;
        } else {
            insert_linear(&mut params, &mut rng, "base.head", cfg.head.input_dim, 3)?;
            insert_linear(&mut params, &mut rng, "base.lip", cfg.lip.pixels(), cfg.lip.dim)?;
        }
    }
    psa::init_params(&mut params, &mut rng, &cfg.audio)?;
    fusion::init_params(&mut params, &mut rng, &cfg.fusion, 3, cfg.lip.dim, cfg.audio.dim)?;
    Ok(params)
}
