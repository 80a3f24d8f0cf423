//! Seeded synthetic conversations seen from a wearable camera.
//!
//! One visible person (the target) is observed through head-orientation
//! features and mouth images; the audio track mixes every person's voice.
//! A frame is labelled positive when the target speaks while facing the
//! camera wearer.

mod format;
mod generate;
pub mod noise;

pub use format::{decode as decode_dataset, encode as encode_dataset, read_dataset, write_dataset, MAGIC, VERSION};
pub use generate::{corrupt_presence, generate, generate_splits, head_map, presence_mask};
pub use noise::{noise_samples, NoiseKind};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::psa::Waveform;
use crate::vmma::PresenceMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(CoreError::Format(format!("unknown split code {c}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MissingModel {
    /// Every frame independently missing with probability `rate`.
    Iid { rate: f64 },
    /// Two-state Markov chain with stationary missing fraction `rate` and
    /// mean missing-run length `mean_len` frames.
    Burst { rate: f64, mean_len: f64 },
}

impl MissingModel {
    pub fn rate(&self) -> f64 {
        match *self {
            MissingModel::Iid { rate } | MissingModel::Burst { rate, .. } => rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rate = self.rate();
        if !(0.0..=1.0).contains(&rate) {
            return Err(CoreError::Config(format!("missing rate {rate} outside [0, 1]")));
        }
        if let MissingModel::Burst { mean_len, .. } = *self {
            if !(mean_len >= 1.0) {
                return Err(CoreError::Config(format!("mean missing run {mean_len} below one frame")));
            }
        }
        Ok(())
    }
}

impl Default for MissingModel {
    fn default() -> Self {
        MissingModel::Burst {
            rate: 1.0 / 3.0,
            mean_len: 15.0,
        }
    }
}

/// Background noise baked into the generated audio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundNoise {
    pub kind: NoiseKind,
    pub snr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub persons: usize,
    /// Index of the visible person whose labels are produced.
    pub target: usize,
    pub frames: usize,
    pub fps: u32,
    pub sample_rate: u32,
    pub head_dim: usize,
    pub head_noise: f64,
    pub lip_height: usize,
    pub lip_width: usize,
    pub lip_channels: usize,
    /// Pixel noise standard deviation on the `[0, 1]` scale.
    pub lip_noise: f64,
    /// Fraction of silent time spent making speech-like mouth movements.
    pub lip_distractor_rate: f64,
    /// Per-frame probability that a silent person starts speaking.
    pub speech_start: f64,
    /// Per-frame probability that a speaker stops.
    pub speech_stop: f64,
    /// Peak amplitude of the fundamental of a voice.
    pub voice_level: f64,
    /// Standard deviation of the always-present sensor noise.
    pub ambient: f64,
    /// Per-frame probability of turning away while facing the wearer.
    pub turn_away: f64,
    /// Per-frame probability of turning back while looking away.
    pub turn_back: f64,
    /// Pins the target's yaw (degrees) for every frame.
    pub fixed_yaw_deg: Option<f64>,
    pub max_yaw_step_deg: f64,
    pub face_threshold_deg: f64,
    pub missing: MissingModel,
    pub background: Option<BackgroundNoise>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            persons: 2,
            target: 0,
            frames: 90,
            fps: 30,
            sample_rate: 16_000,
            head_dim: 32,
            head_noise: 0.05,
            lip_height: 64,
            lip_width: 64,
            lip_channels: 1,
            lip_noise: 0.1,
            lip_distractor_rate: 1.0,
            speech_start: 0.06,
            speech_stop: 0.04,
            voice_level: 0.05,
            ambient: 0.002,
            turn_away: 0.03,
            turn_back: 0.04,
            fixed_yaw_deg: None,
            max_yaw_step_deg: 6.0,
            face_threshold_deg: 30.0,
            missing: MissingModel::default(),
            background: None,
            train: 200,
            val: 40,
            test: 40,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.persons) {
            return Err(CoreError::Config(format!("persons must be 1 to 3, got {}", self.persons)));
        }
        if self.target >= self.persons {
            return Err(CoreError::Config(format!(
                "target person {} out of range for {} persons",
                self.target, self.persons
            )));
        }
        if self.frames == 0 || self.fps == 0 || self.sample_rate == 0 {
            return Err(CoreError::Config("frames, fps and sample rate must be positive".into()));
        }
        if self.head_dim < 3 {
            return Err(CoreError::Config(format!("head features need at least 3 dims, got {}", self.head_dim)));
        }
        if self.lip_height == 0 || self.lip_width == 0 || self.lip_channels == 0 {
            return Err(CoreError::Config("lip image dimensions must be positive".into()));
        }
        for (name, p) in [
            ("lip_distractor_rate", self.lip_distractor_rate),
            ("speech_start", self.speech_start),
            ("speech_stop", self.speech_stop),
            ("turn_away", self.turn_away),
            ("turn_back", self.turn_back),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("head_noise", self.head_noise),
            ("lip_noise", self.lip_noise),
            ("voice_level", self.voice_level),
            ("ambient", self.ambient),
            ("max_yaw_step_deg", self.max_yaw_step_deg),
            ("face_threshold_deg", self.face_threshold_deg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CoreError::Config(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        self.missing.validate()
    }

    pub fn samples_per_sequence(&self) -> usize {
        self.frames * self.sample_rate as usize / self.fps as usize
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn lip_pixels(&self) -> usize {
        self.lip_height * self.lip_width * self.lip_channels
    }
}

/// Generator state kept for inspection; not needed by the model.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Whether the target speaks, per frame.
    pub speaking: Vec<bool>,
    /// Number of persons speaking, per frame.
    pub active: Vec<u8>,
    /// Target yaw in radians, per frame.
    pub yaw: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: u32,
    pub persons: u8,
    /// `T × head_dim`, zero where the head crop is missing.
    pub head: Vec<f32>,
    /// `T × H × W × C`.
    pub lip: Vec<u8>,
    pub audio: Vec<f32>,
    pub sample_rate: u32,
    pub mask: Vec<bool>,
    pub labels: Vec<bool>,
    pub truth: GroundTruth,
}

impl Sequence {
    pub fn frames(&self) -> usize {
        self.labels.len()
    }

    pub fn presence(&self) -> PresenceMask {
        PresenceMask::new(self.mask.clone())
    }

    pub fn waveform(&self) -> Result<Waveform> {
        Waveform::new(self.audio.iter().map(|&s| s as f64).collect(), self.sample_rate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioDataset {
    pub split: Split,
    pub frames: usize,
    pub fps: u32,
    pub sample_rate: u32,
    pub head_dim: usize,
    pub lip_height: usize,
    pub lip_width: usize,
    pub lip_channels: usize,
    pub sequences: Vec<Sequence>,
}

impl ScenarioDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Fraction of all frames labelled positive.
    pub fn positive_rate(&self) -> f64 {
        let (pos, total) = self.sequences.iter().fold((0usize, 0usize), |(p, t), s| {
            (p + s.labels.iter().filter(|&&y| y).count(), t + s.frames())
        });
        pos as f64 / total.max(1) as f64
    }
}
