//! Background noise sources.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    /// Low-frequency harmonic hum with slow amplitude modulation over a
    /// broadband floor.
    Machinery,
    /// One of the three above, chosen per draw.
    Mixed,
}

impl NoiseKind {
    pub const CONCRETE: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Machinery];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Machinery => "machinery",
            NoiseKind::Mixed => "mixed",
        }
    }
}

/// `len` samples with RMS exactly `rms` (unless the draw is silent).
pub fn noise_samples<R: Rng + ?Sized>(kind: NoiseKind, len: usize, sample_rate: u32, rms: f64, rng: &mut R) -> Vec<f64> {
    let kind = match kind {
        NoiseKind::Mixed => NoiseKind::CONCRETE[rng.random_range(0..3)],
        k => k,
    };
    let mut x: Vec<f64> = match kind {
        NoiseKind::White => (0..len).map(|_| StandardNormal.sample(rng)).collect(),
        NoiseKind::Pink => pink(len, rng),
        NoiseKind::Machinery => machinery(len, sample_rate as f64, rng),
        NoiseKind::Mixed => unreachable!("resolved above"),
    };
    let p = x.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64;
    if p > 0.0 {
        let g = rms / p.sqrt();
        for v in &mut x {
            *v *= g;
        }
    }
    x
}

/// Kellet's refined pink filter over white noise.
fn pink<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    (0..len)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let out = b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + w * 0.5362;
            b[6] = w * 0.115926;
            out
        })
        .collect()
}

fn machinery<R: Rng + ?Sized>(len: usize, sr: f64, rng: &mut R) -> Vec<f64> {
    let base = rng.random_range(80.0..220.0);
    let wobble_rate = rng.random_range(2.0..8.0);
    let drift = rng.random_range(-0.03..0.03);
    let phases: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let mut phase = 0.0;
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let f = base * (1.0 + drift * (2.0 * PI * 0.3 * t).sin());
            phase += 2.0 * PI * f / sr;
            let hum: f64 = phases
                .iter()
                .enumerate()
                .map(|(h, p)| ((h + 1) as f64 * phase + p).sin() / (h + 1) as f64)
                .sum();
            let am = 0.6 + 0.4 * (2.0 * PI * wobble_rate * t).sin();
            let floor: f64 = StandardNormal.sample(rng);
            am * hum + 0.3 * floor
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rms_is_exact() {
        for kind in [NoiseKind::White, NoiseKind::Pink, NoiseKind::Machinery, NoiseKind::Mixed] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let x = noise_samples(kind, 4000, 16_000, 0.1, &mut rng);
            let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
            assert!((rms - 0.1).abs() < 1e-12, "{kind:?}");
        }
    }
}
