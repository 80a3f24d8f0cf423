use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use super::noise::noise_samples;
use super::{GroundTruth, MissingModel, ScenarioConfig, ScenarioDataset, Sequence, Split};
use crate::error::Result;
use crate::psa::{scale_noise_to_snr, Waveform};
use crate::rng::{stream, tag};

const HARMONICS: usize = 4;
const F0_RANGE: (f64, f64) = (100.0, 280.0);
const F0_GAP: f64 = 25.0;
const ENVELOPE_TAU: f64 = 0.015;
const CLOSED_APERTURE: f64 = 0.03;
const DISTRACTOR_APERTURE: f64 = 0.35;

/// Fixed `head_dim × 3` map with orthonormal columns, shared by every split
/// generated from `seed`. Row-major.
pub fn head_map(seed: u64, head_dim: usize) -> Vec<f64> {
    let mut rng = stream(seed, &[tag("head_map")]);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(3);
    while cols.len() < 3 {
        let mut v: Vec<f64> = (0..head_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(c) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut m = vec![0.0; head_dim * 3];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..head_dim {
            m[i * 3 + j] = c[i];
        }
    }
    m
}

/// All three splits.
pub fn generate_splits(cfg: &ScenarioConfig) -> Result<[ScenarioDataset; 3]> {
    Ok([
        generate(cfg, Split::Train)?,
        generate(cfg, Split::Val)?,
        generate(cfg, Split::Test)?,
    ])
}

pub fn generate(cfg: &ScenarioConfig, split: Split) -> Result<ScenarioDataset> {
    cfg.validate()?;
    let map = head_map(cfg.seed, cfg.head_dim);
    let sequences = (0..cfg.count(split))
        .into_par_iter()
        .map(|i| sequence(cfg, split, i, &map))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioDataset {
        split,
        frames: cfg.frames,
        fps: cfg.fps,
        sample_rate: cfg.sample_rate,
        head_dim: cfg.head_dim,
        lip_height: cfg.lip_height,
        lip_width: cfg.lip_width,
        lip_channels: cfg.lip_channels,
        sequences,
    })
}

/// Presence bits for `frames` frames; `true` means present.
pub fn presence_mask<R: Rng + ?Sized>(model: &MissingModel, frames: usize, rng: &mut R) -> Vec<bool> {
    match *model {
        MissingModel::Iid { rate } => (0..frames).map(|_| !(rng.random::<f64>() < rate)).collect(),
        MissingModel::Burst { rate, mean_len } => {
            if rate <= 0.0 {
                return vec![true; frames];
            }
            if rate >= 1.0 {
                return vec![false; frames];
            }
            let leave = 1.0 / mean_len;
            let enter = (rate / ((1.0 - rate) * mean_len)).min(1.0);
            let mut missing = rng.random::<f64>() < rate;
            (0..frames)
                .map(|t| {
                    if t > 0 {
                        let u: f64 = rng.random();
                        missing = if missing { u >= leave } else { u < enter };
                    }
                    !missing
                })
                .collect()
        }
    }
}

/// Draws a fresh mask per sequence and removes head features where either
/// the old or the new mask marks the frame missing.
pub fn corrupt_presence(dataset: &ScenarioDataset, model: &MissingModel, seed: u64) -> Result<ScenarioDataset> {
    model.validate()?;
    let mut out = dataset.clone();
    let dim = dataset.head_dim;
    for seq in &mut out.sequences {
        let mut rng = stream(seed, &[tag("corrupt"), tag(dataset.split.name()), seq.id as u64]);
        let draw = presence_mask(model, seq.frames(), &mut rng);
        for (t, keep) in draw.into_iter().enumerate() {
            seq.mask[t] &= keep;
            if !seq.mask[t] {
                seq.head[t * dim..(t + 1) * dim].fill(0.0);
            }
        }
    }
    Ok(out)
}

fn markov<R: Rng + ?Sized>(frames: usize, start: f64, stop: f64, rng: &mut R) -> Vec<bool> {
    let stationary = if start + stop > 0.0 { start / (start + stop) } else { 0.0 };
    let mut on = rng.random::<f64>() < stationary;
    (0..frames)
        .map(|t| {
            if t > 0 {
                let u: f64 = rng.random();
                on = if on { u >= stop } else { u < start };
            }
            on
        })
        .collect()
}

fn fundamentals<R: Rng + ?Sized>(persons: usize, rng: &mut R) -> Vec<f64> {
    let mut f0s: Vec<f64> = Vec::with_capacity(persons);
    while f0s.len() < persons {
        let f = rng.random_range(F0_RANGE.0..F0_RANGE.1);
        if f0s.iter().all(|g| (g - f).abs() >= F0_GAP) {
            f0s.push(f);
        }
    }
    f0s
}

struct Voice {
    samples: Vec<f64>,
    /// Mean envelope per video frame, in `[0, 1]`.
    frame_envelope: Vec<f64>,
}

fn voice<R: Rng + ?Sized>(cfg: &ScenarioConfig, speaking: &[bool], f0: f64, rng: &mut R) -> Voice {
    let sr = cfg.sample_rate as f64;
    let n = cfg.samples_per_sequence();
    let per_frame = n / cfg.frames;
    let syllable_rate = rng.random_range(3.0..5.0);
    let syllable_phase = rng.random_range(0.0..2.0 * PI);
    let vibrato = rng.random_range(4.0..6.0);
    let phases: Vec<f64> = (0..HARMONICS).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let gain = cfg.voice_level * rng.random_range(0.8..1.2);
    let alpha = 1.0 - (-1.0 / (ENVELOPE_TAU * sr)).exp();
    let mut env = 0.0;
    let mut phase = 0.0;
    let mut samples = Vec::with_capacity(n);
    let mut frame_envelope = vec![0.0; cfg.frames];
    for i in 0..n {
        let t = i as f64 / sr;
        let frame = (i / per_frame).min(cfg.frames - 1);
        let target = if speaking[frame] {
            0.55 + 0.45 * (2.0 * PI * syllable_rate * t + syllable_phase).sin()
        } else {
            0.0
        };
        env += (target - env) * alpha;
        phase += 2.0 * PI * f0 * (1.0 + 0.01 * (2.0 * PI * vibrato * t).sin()) / sr;
        let tone: f64 = phases
            .iter()
            .enumerate()
            .map(|(h, p)| ((h + 1) as f64 * phase + p).sin() / (h + 1) as f64)
            .sum();
        samples.push(gain * env * tone);
        frame_envelope[frame] += env / per_frame as f64;
    }
    Voice {
        samples,
        frame_envelope,
    }
}

struct Pose {
    yaw: Vec<f64>,
    pitch: Vec<f64>,
    roll: Vec<f64>,
}

fn pose<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Pose {
    let deg = PI / 180.0;
    let step = cfg.max_yaw_step_deg * deg;
    let facing_spread = Normal::new(0.0, 8.0 * deg).expect("finite");
    let away_target = |rng: &mut R| {
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        side * rng.random_range(50.0..150.0) * deg
    };
    let facing_states = markov(cfg.frames, cfg.turn_back, cfg.turn_away, rng);
    let mut target = if facing_states[0] {
        facing_spread.sample(rng)
    } else {
        away_target(rng)
    };
    let mut yaw_now = target;
    let (mut p, mut r) = (0.0f64, 0.0f64);
    let mut out = Pose {
        yaw: Vec::with_capacity(cfg.frames),
        pitch: Vec::with_capacity(cfg.frames),
        roll: Vec::with_capacity(cfg.frames),
    };
    for t in 0..cfg.frames {
        if t > 0 && facing_states[t] != facing_states[t - 1] {
            target = if facing_states[t] {
                facing_spread.sample(rng)
            } else {
                away_target(rng)
            };
        }
        let jitter: f64 = 0.5 * deg * rand_distr::Distribution::<f64>::sample(&StandardNormal, rng);
        if t > 0 {
            yaw_now += (target - yaw_now + jitter).clamp(-step, step);
        }
        yaw_now = yaw_now.clamp(-150.0 * deg, 150.0 * deg);
        let dp: f64 = StandardNormal.sample(rng);
        let dr: f64 = StandardNormal.sample(rng);
        p = (0.95 * p + deg * dp).clamp(-25.0 * deg, 25.0 * deg);
        r = (0.95 * r + deg * dr).clamp(-15.0 * deg, 15.0 * deg);
        out.yaw.push(cfg.fixed_yaw_deg.map_or(yaw_now, |y| y * deg));
        out.pitch.push(p);
        out.roll.push(r);
    }
    out
}

fn apertures<R: Rng + ?Sized>(cfg: &ScenarioConfig, speaking: &[bool], envelope: &[f64], rng: &mut R) -> Vec<f64> {
    let rate = cfg.lip_distractor_rate;
    let distracted = markov(cfg.frames, 0.1 * rate, 0.1 * (1.0 - rate), rng);
    let chew_rate = rng.random_range(2.0..3.0);
    let chew_phase = rng.random_range(0.0..2.0 * PI);
    (0..cfg.frames)
        .map(|t| {
            if speaking[t] {
                envelope[t].max(CLOSED_APERTURE)
            } else if distracted[t] {
                let time = t as f64 / cfg.fps as f64;
                CLOSED_APERTURE + DISTRACTOR_APERTURE * (2.0 * PI * chew_rate * time + chew_phase).sin().abs()
            } else {
                CLOSED_APERTURE
            }
        })
        .collect()
}

fn smoothstep(edge: f64, x: f64) -> f64 {
    // coverage of a pixel at signed distance `x` from an edge
    (0.5 - (x - edge) * 0.5).clamp(0.0, 1.0)
}

fn render_lips<R: Rng + ?Sized>(cfg: &ScenarioConfig, aperture: &[f64], rng: &mut R, out: &mut Vec<u8>) {
    let (h, w, c) = (cfg.lip_height as f64, cfg.lip_width as f64, cfg.lip_channels);
    let skin = rng.random_range(0.55..0.75);
    let lip_tone = skin - rng.random_range(0.15..0.25);
    let (ox, oy) = (rng.random_range(-0.04..0.04) * w, rng.random_range(-0.04..0.04) * h);
    let pixel_noise = Normal::new(0.0, cfg.lip_noise.max(1e-12)).expect("finite");
    let tint: Vec<f64> = (0..c).map(|_| rng.random_range(0.9..1.1)).collect();
    for &a in aperture {
        let cx = w / 2.0 + ox + rng.random_range(-0.5..0.5);
        let cy = h / 2.0 + oy + rng.random_range(-0.5..0.5);
        let ax = 0.32 * w * (1.0 - 0.15 * a);
        let ay = h * (0.02 + 0.22 * a);
        let (lx, ly) = (ax + 0.06 * w, ay + 0.06 * h);
        for y in 0..cfg.lip_height {
            for x in 0..cfg.lip_width {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                // approximate signed pixel distance to each ellipse boundary
                let outer = ((dx / lx).powi(2) + (dy / ly).powi(2)).sqrt();
                let inner = ((dx / ax).powi(2) + (dy / ay.max(0.5)).powi(2)).sqrt();
                let lip_w = smoothstep(0.0, (outer - 1.0) * lx.min(ly));
                let mouth_w = smoothstep(0.0, (inner - 1.0) * ax.min(ay.max(0.5)));
                let v = skin * (1.0 - lip_w) + lip_w * (lip_tone * (1.0 - mouth_w) + 0.1 * mouth_w);
                for tc in &tint {
                    let noisy = if cfg.lip_noise > 0.0 { v * tc + pixel_noise.sample(rng) } else { v * tc };
                    out.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
    }
}

fn sequence(cfg: &ScenarioConfig, split: Split, index: usize, map: &[f64]) -> Result<Sequence> {
    let base = [tag(split.name()), index as u64];
    let sub = |label: &str, extra: u64| {
        let path = [base[0], base[1], tag(label), extra];
        stream(cfg.seed, &path)
    };
    let deg = PI / 180.0;
    let n = cfg.samples_per_sequence();
    let f0s = fundamentals(cfg.persons, &mut sub("voice", 0));
    let mut speaking = Vec::with_capacity(cfg.persons);
    let mut voices = Vec::with_capacity(cfg.persons);
    for (p, &f0) in f0s.iter().enumerate() {
        let s = markov(cfg.frames, cfg.speech_start, cfg.speech_stop, &mut sub("speech", p as u64));
        voices.push(voice(cfg, &s, f0, &mut sub("synth", p as u64)));
        speaking.push(s);
    }

    let mut ambient_rng = sub("ambient", 0);
    let mut audio: Vec<f64> = (0..n)
        .map(|i| {
            let floor: f64 = StandardNormal.sample(&mut ambient_rng);
            voices.iter().map(|v| v.samples[i]).sum::<f64>() + cfg.ambient * floor
        })
        .collect();
    if let Some(bg) = cfg.background {
        let clean = Waveform::new(audio.clone(), cfg.sample_rate)?;
        if clean.power() > 0.0 {
            let noise = noise_samples(bg.kind, n, cfg.sample_rate, 0.1, &mut sub("background", 0));
            let noise = Waveform::new(noise, cfg.sample_rate)?;
            audio = scale_noise_to_snr(&clean, &noise, bg.snr_db)?.samples;
        }
    }

    let tgt = cfg.target;
    let pose = pose(cfg, &mut sub("pose", 0));
    // decided on the stored single-precision yaw so the file alone reproduces labels
    let threshold = (cfg.face_threshold_deg * deg) as f32;
    let labels: Vec<bool> = (0..cfg.frames)
        .map(|t| speaking[tgt][t] && (pose.yaw[t] as f32).abs() <= threshold)
        .collect();

    let mut noise_rng = sub("head_noise", 0);
    let head_noise = Normal::new(0.0, cfg.head_noise.max(1e-12)).expect("finite");
    let mask = presence_mask(&cfg.missing, cfg.frames, &mut sub("mask", 0));
    let d = cfg.head_dim;
    let mut head = vec![0.0f32; cfg.frames * d];
    for t in 0..cfg.frames {
        let angles = [pose.yaw[t], pose.pitch[t], pose.roll[t]];
        for i in 0..d {
            let clean: f64 = (0..3).map(|j| map[i * 3 + j] * angles[j]).sum();
            let e = if cfg.head_noise > 0.0 { head_noise.sample(&mut noise_rng) } else { 0.0 };
            if mask[t] {
                head[t * d + i] = (clean + e) as f32;
            }
        }
    }

    let mut lip_rng = sub("lip", 0);
    let ap = apertures(cfg, &speaking[tgt], &voices[tgt].frame_envelope, &mut lip_rng);
    let mut lip = Vec::with_capacity(cfg.frames * cfg.lip_pixels());
    render_lips(cfg, &ap, &mut lip_rng, &mut lip);

    let active = (0..cfg.frames)
        .map(|t| speaking.iter().filter(|s| s[t]).count() as u8)
        .collect();
    Ok(Sequence {
        id: index as u32,
        persons: cfg.persons as u8,
        head,
        lip,
        audio: audio.iter().map(|&s| s.clamp(-1.0, 1.0) as f32).collect(),
        sample_rate: cfg.sample_rate,
        mask,
        labels,
        truth: GroundTruth {
            speaking: speaking[tgt].clone(),
            active,
            yaw: pose.yaw.iter().map(|&y| y as f32).collect(),
        },
    })
}
