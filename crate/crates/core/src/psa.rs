//! Audio branch: waveform mixing, log-mel front end, and the shared-weight
//! encoder applied to both the clean and the noise-mixed stream.

use std::f64::consts::PI;
use std::sync::Arc;

use numkit::{Graph, ParameterSet, Tensor, Var};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{insert_linear, linear};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(CoreError::Contract("empty waveform".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean square amplitude.
    pub fn power(&self) -> f64 {
        power(&self.samples)
    }
}

pub fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// `(1 − γ)·clean + γ·noise`, clamped to `[−1, 1]`. The noise is cropped to
/// the clean length starting at an offset drawn from `rng`.
pub fn mix_noise<R: Rng + ?Sized>(clean: &Waveform, noise: &Waveform, gamma: f64, rng: &mut R) -> Result<Waveform> {
    if clean.sample_rate != noise.sample_rate {
        return Err(CoreError::Config(format!(
            "sample rate mismatch: clean {} Hz, noise {} Hz",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(CoreError::Contract(format!("mixing ratio {gamma} outside [0, 1]")));
    }
    if noise.len() < clean.len() {
        return Err(CoreError::Length {
            len: noise.len(),
            need: clean.len(),
        });
    }
    let offset = rng.random_range(0..=noise.len() - clean.len());
    let n = &noise.samples[offset..offset + clean.len()];
    let samples = clean
        .samples
        .iter()
        .zip(n)
        .map(|(c, n)| ((1.0 - gamma) * c + gamma * n).clamp(-1.0, 1.0))
        .collect();
    Waveform::new(samples, clean.sample_rate)
}

/// `clean + g·noise` with `g` chosen so the clean-to-added-noise power ratio
/// is exactly `snr_db`. Uses the first `clean.len()` noise samples. The sum
/// is not clamped.
pub fn scale_noise_to_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if clean.sample_rate != noise.sample_rate {
        return Err(CoreError::Config(format!(
            "sample rate mismatch: clean {} Hz, noise {} Hz",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if noise.len() < clean.len() {
        return Err(CoreError::Length {
            len: noise.len(),
            need: clean.len(),
        });
    }
    let n = &noise.samples[..clean.len()];
    let (pc, pn) = (clean.power(), power(n));
    if !(pc > 0.0) {
        return Err(CoreError::Contract("clean waveform has zero power".into()));
    }
    if !(pn > 0.0) {
        return Err(CoreError::Contract("noise has zero power".into()));
    }
    let g = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = clean.samples.iter().zip(n).map(|(c, n)| c + g * n).collect();
    Waveform::new(samples, clean.sample_rate)
}

// ---- log-mel front end ----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8_000.0,
            floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            (len - self.window) / self.hop + 1
        }
    }

    /// Centre of mel frame `m` in seconds.
    pub fn frame_center(&self, m: usize) -> f64 {
        (m * self.hop) as f64 / self.sample_rate as f64 + self.window as f64 / (2.0 * self.sample_rate as f64)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `frames × n_mels` natural-log mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub n_mels: usize,
    pub data: Vec<f64>,
}

impl MelSpectrogram {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.data[m * self.n_mels..(m + 1) * self.n_mels]
    }
}

struct Band {
    start: usize,
    weights: Vec<f64>,
}

/// Precomputed window, FFT plan and filterbank.
pub struct MelFrontEnd {
    cfg: MelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bands: Vec<Band>,
    edges: Vec<f64>,
}

impl std::fmt::Debug for MelFrontEnd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontEnd").field("cfg", &self.cfg).finish()
    }
}

impl MelFrontEnd {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        if cfg.window == 0 || cfg.hop == 0 || cfg.n_fft < cfg.window || cfg.n_mels == 0 {
            return Err(CoreError::Config(format!(
                "mel framing window {} hop {} n_fft {} bands {}",
                cfg.window, cfg.hop, cfg.n_fft, cfg.n_mels
            )));
        }
        if !(cfg.f_min >= 0.0 && cfg.f_max > cfg.f_min && cfg.f_max <= cfg.sample_rate as f64 / 2.0) {
            return Err(CoreError::Config(format!(
                "mel range {}..{} Hz at {} Hz",
                cfg.f_min, cfg.f_max, cfg.sample_rate
            )));
        }
        if !(cfg.floor > 0.0) {
            return Err(CoreError::Config("mel log floor must be positive".into()));
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        // periodic Hann
        let window = (0..cfg.window)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.window as f64).cos())
            .collect();
        let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let n_bins = cfg.n_fft / 2 + 1;
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let bands = (0..cfg.n_mels)
            .map(|b| {
                let (lo, c, hi) = (edges[b], edges[b + 1], edges[b + 2]);
                let w: Vec<f64> = (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        ((f - lo) / (c - lo)).min((hi - f) / (hi - c)).max(0.0)
                    })
                    .collect();
                let start = w.iter().position(|&x| x > 0.0).unwrap_or(0);
                let end = w.iter().rposition(|&x| x > 0.0).map_or(start, |e| e + 1);
                Band {
                    start,
                    weights: w[start..end].to_vec(),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            fft,
            window,
            bands,
            edges,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Lower edge, centre and upper edge of band `b` in Hz.
    pub fn band_edges(&self, b: usize) -> (f64, f64, f64) {
        (self.edges[b], self.edges[b + 1], self.edges[b + 2])
    }

    /// Triangular weight of band `b` on FFT bin `k`.
    pub fn weight(&self, b: usize, k: usize) -> f64 {
        let band = &self.bands[b];
        if k < band.start {
            0.0
        } else {
            band.weights.get(k - band.start).copied().unwrap_or(0.0)
        }
    }

    pub fn compute(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let cfg = &self.cfg;
        if w.sample_rate != cfg.sample_rate {
            return Err(CoreError::Config(format!(
                "waveform at {} Hz, front end expects {} Hz",
                w.sample_rate, cfg.sample_rate
            )));
        }
        let frames = cfg.frame_count(w.len());
        if frames == 0 {
            return Err(CoreError::Length {
                len: w.len(),
                need: cfg.window,
            });
        }
        let n_bins = cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mag = vec![0.0; n_bins];
        let mut data = Vec::with_capacity(frames * cfg.n_mels);
        for m in 0..frames {
            let seg = &w.samples[m * cfg.hop..m * cfg.hop + cfg.window];
            for (i, z) in buf.iter_mut().enumerate() {
                *z = Complex::new(if i < cfg.window { seg[i] * self.window[i] } else { 0.0 }, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, v) in mag.iter_mut().enumerate() {
                *v = buf[k].norm();
            }
            for band in &self.bands {
                let e: f64 = band
                    .weights
                    .iter()
                    .zip(&mag[band.start..])
                    .map(|(w, m)| w * m)
                    .sum();
                data.push(e.max(cfg.floor).ln());
            }
        }
        Ok(MelSpectrogram {
            frames,
            n_mels: cfg.n_mels,
            data,
        })
    }
}

pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    MelFrontEnd::new(cfg.clone())?.compute(w)
}

// ---- shared-weight encoder ------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioConfig {
    pub n_mels: usize,
    pub channels: usize,
    pub dim: usize,
    /// Fixed affine map applied to log-mel input: `(x − shift)/scale`.
    pub input_shift: f64,
    pub input_scale: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            channels: 32,
            dim: 32,
            input_shift: -4.0,
            input_scale: 4.0,
        }
    }
}

const KERNEL: usize = 3;
const STRIDE2: usize = 2;

/// Output length of the two-layer convolution stack for `mel_frames` inputs.
pub fn conv_frames(mel_frames: usize) -> usize {
    if mel_frames < 2 * KERNEL - 1 {
        0
    } else {
        (mel_frames - (KERNEL - 1) - KERNEL) / STRIDE2 + 1
    }
}

/// Centre of encoder output frame `j`, as a mel frame index.
fn conv_center(j: usize) -> usize {
    STRIDE2 * j + KERNEL - 1
}

/// Row-normalized `video_frames × J` averaging matrix. Each encoder frame is
/// assigned to the video frame containing its centre time; video frames
/// left without any take their nearest encoder frame.
pub fn pooling_matrix(mel: &MelConfig, mel_frames: usize, fps: f64, video_frames: usize) -> Result<Tensor> {
    let j = conv_frames(mel_frames);
    if j == 0 || video_frames == 0 {
        return Err(CoreError::Length {
            len: mel_frames,
            need: 2 * KERNEL - 1,
        });
    }
    let centers: Vec<f64> = (0..j).map(|i| mel.frame_center(conv_center(i))).collect();
    let mut m = vec![0.0; video_frames * j];
    let mut counts = vec![0usize; video_frames];
    for (i, &c) in centers.iter().enumerate() {
        let t = ((c * fps).floor() as usize).min(video_frames - 1);
        m[t * j + i] = 1.0;
        counts[t] += 1;
    }
    for t in 0..video_frames {
        if counts[t] == 0 {
            let mid = (t as f64 + 0.5) / fps;
            let nearest = (0..j)
                .min_by(|&a, &b| (centers[a] - mid).abs().total_cmp(&(centers[b] - mid).abs()))
                .unwrap_or(0);
            m[t * j + nearest] = 1.0;
        } else {
            let inv = 1.0 / counts[t] as f64;
            for v in &mut m[t * j..(t + 1) * j] {
                *v *= inv;
            }
        }
    }
    Ok(Tensor::new(vec![video_frames, j], m)?)
}

/// Log-mel grid as an encoder input tensor after the fixed input map.
pub fn mel_input(spec: &MelSpectrogram, cfg: &AudioConfig) -> Result<Tensor> {
    if spec.n_mels != cfg.n_mels {
        return Err(CoreError::Config(format!(
            "spectrogram has {} bands, encoder expects {}",
            spec.n_mels, cfg.n_mels
        )));
    }
    let data = spec
        .data
        .iter()
        .map(|x| (x - cfg.input_shift) / cfg.input_scale)
        .collect();
    Ok(Tensor::new(vec![spec.frames, spec.n_mels], data)?)
}

pub fn init_params<R: Rng>(params: &mut ParameterSet, rng: &mut R, cfg: &AudioConfig) -> Result<()> {
    insert_linear(params, rng, "audio.conv1", KERNEL * cfg.n_mels, cfg.channels)?;
    insert_linear(params, rng, "audio.conv2", KERNEL * cfg.channels, cfg.channels)?;
    insert_linear(params, rng, "audio.head", cfg.channels, cfg.dim)?;
    Ok(())
}

/// `f_enc`: `F × n_mels` input to `video_frames × dim` through the pooling
/// matrix `pool` (a constant).
pub fn audio_encoder(g: &mut Graph, params: &ParameterSet, mel: Var, pool: Var) -> Result<Var> {
    let x = g.unfold_rows(mel, KERNEL, 1)?;
    let x = linear(g, params, "audio.conv1", x)?;
    let x = g.gelu(x)?;
    let x = g.unfold_rows(x, KERNEL, STRIDE2)?;
    let x = linear(g, params, "audio.conv2", x)?;
    let x = g.gelu(x)?;
    let x = linear(g, params, "audio.head", x)?;
    let (pt, pj) = g.value(pool).dims2()?;
    let (j, _) = g.value(x).dims2()?;
    if pj != j {
        return Err(CoreError::Config(format!(
            "pooling matrix {pt}×{pj} does not match {j} encoder frames"
        )));
    }
    Ok(g.matmul(pool, x)?)
}

/// Runs the one encoder on both spectrograms: `(z_a, z_m)`.
pub fn psa_forward(g: &mut Graph, params: &ParameterSet, s_a: Var, s_m: Var, pool: Var) -> Result<(Var, Var)> {
    if g.shape(s_a) != g.shape(s_m) {
        return Err(CoreError::Config(format!(
            "clean spectrogram {:?} and mixed spectrogram {:?} differ in framing",
            g.shape(s_a),
            g.shape(s_m)
        )));
    }
    let z_a = audio_encoder(g, params, s_a, pool)?;
    let z_m = audio_encoder(g, params, s_m, pool)?;
    Ok((z_a, z_m))
}

/// `‖z_a − z_m‖²` summed over every element.
pub fn consistency_loss(g: &mut Graph, z_a: Var, z_m: Var) -> Result<Var> {
    if g.shape(z_a) != g.shape(z_m) {
        return Err(CoreError::Dim(format!(
            "consistency loss on {:?} vs {:?}",
            g.shape(z_a),
            g.shape(z_m)
        )));
    }
    let d = g.sub(z_a, z_m)?;
    let sq = g.square(d)?;
    Ok(g.sum(sq)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn wf(x: &[f64]) -> Waveform {
        Waveform::new(x.to_vec(), 16_000).unwrap()
    }

    #[test]
    fn mix_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = mix_noise(&wf(&[1.0, -1.0]), &wf(&[0.0, 0.0]), 0.5, &mut rng).unwrap();
        assert_eq!(out.samples, vec![0.5, -0.5]);
        let clean = wf(&[0.2, 0.3, -0.1]);
        let noise = wf(&[0.7, 0.7, 0.7]);
        assert_eq!(mix_noise(&clean, &noise, 0.0, &mut rng).unwrap(), clean);
        assert_eq!(mix_noise(&clean, &noise, 1.0, &mut rng).unwrap().samples, vec![0.7; 3]);
    }

    #[test]
    fn mix_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clean = wf(&[0.1, 0.2]);
        let other = Waveform::new(vec![0.0; 4], 8_000).unwrap();
        assert!(matches!(mix_noise(&clean, &other, 0.5, &mut rng), Err(CoreError::Config(_))));
        assert!(matches!(mix_noise(&clean, &clean, 1.5, &mut rng), Err(CoreError::Contract(_))));
        assert!(matches!(
            mix_noise(&clean, &wf(&[0.0]), 0.5, &mut rng),
            Err(CoreError::Length { .. })
        ));
    }

    #[test]
    fn mix_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = mix_noise(&wf(&[1.0]), &wf(&[3.0]), 0.5, &mut rng).unwrap();
        assert_eq!(out.samples, vec![1.0]);
    }

    #[test]
    fn snr_definition() {
        let clean = wf(&[0.5, -0.5, 0.25, -0.25]);
        let noise = wf(&[0.1, 0.3, -0.2, 0.05]);
        for snr in [0.0, 10.0] {
            let out = scale_noise_to_snr(&clean, &noise, snr).unwrap();
            let added: Vec<f64> = out.samples.iter().zip(&clean.samples).map(|(o, c)| o - c).collect();
            let ratio = clean.power() / power(&added);
            assert!((ratio - 10f64.powf(snr / 10.0)).abs() < 1e-9 * ratio);
        }
        assert!(matches!(
            scale_noise_to_snr(&clean, &wf(&[0.0; 4]), 0.0),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn frame_count() {
        let cfg = MelConfig::default();
        assert_eq!(cfg.frame_count(16_000), 98);
        assert_eq!(cfg.frame_count(399), 0);
        let err = mel_spectrogram(&wf(&[0.0; 399]), &cfg).unwrap_err();
        assert!(matches!(err, CoreError::Length { len: 399, need: 400 }));
    }

    #[test]
    fn silence_hits_the_floor() {
        let spec = mel_spectrogram(&wf(&[0.0; 800]), &MelConfig::default()).unwrap();
        assert_eq!(spec.frames, 3);
        assert!(spec.data.iter().all(|&v| v == 1e-10f64.ln()));
    }

    #[test]
    fn pooling_rows_average() {
        let mel = MelConfig::default();
        let frames = mel.frame_count(48_000);
        let p = pooling_matrix(&mel, frames, 30.0, 90).unwrap();
        assert_eq!(p.shape(), &[90, conv_frames(frames)]);
        for t in 0..90 {
            let s: f64 = p.row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let l = consistency_loss(&mut g, a, b).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let z = consistency_loss(&mut g, a, a).unwrap();
        assert_eq!(g.value(z).item(), 0.0);
        let c = g.constant(Tensor::vector(vec![0.0; 3]));
        assert!(matches!(consistency_loss(&mut g, a, c), Err(CoreError::Dim(_))));
    }
}
