use std::f64::consts::PI;

use numkit::gradcheck::check_params;
use numkit::{Graph, ParameterSet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttm_core::psa::*;

fn tone(freq: f64, secs: f64) -> Waveform {
    let n = (16_000.0 * secs) as usize;
    Waveform::new((0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 16_000.0).sin()).collect(), 16_000).unwrap()
}

fn noise(n: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), 16_000).unwrap()
}

#[test]
fn one_second_gives_98_frames() {
    let cfg = MelConfig::default();
    assert_eq!(cfg.frame_count(16_000), 98);
    let spec = mel_spectrogram(&noise(16_000, 1), &cfg).unwrap();
    assert_eq!((spec.frames, spec.n_mels), (98, 80));
    assert!(spec.data.iter().all(|x| x.is_finite()));
}

/// Band energies from a direct O(n²) DFT of the Hann-windowed frame.
fn dft_band_energies(fe: &MelFrontEnd, frame: &[f64]) -> Vec<f64> {
    let cfg = fe.config();
    let n = cfg.n_fft;
    let mags: Vec<f64> = (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &x) in frame.iter().enumerate() {
                let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.window as f64).cos();
                let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                re += x * w * ang.cos();
                im += x * w * ang.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect();
    (0..cfg.n_mels)
        .map(|b| (0..mags.len()).map(|k| fe.weight(b, k) * mags[k]).sum::<f64>().max(cfg.floor).ln())
        .collect()
}

#[test]
fn tone_peaks_in_its_band() {
    let fe = MelFrontEnd::new(MelConfig::default()).unwrap();
    let w = tone(440.0, 0.1);
    let spec = fe.compute(&w).unwrap();
    for m in [0, 3] {
        let row = spec.row(m);
        let oracle = dft_band_energies(&fe, &w.samples[m * 160..m * 160 + 400]);
        // compared as energies; weak bands carry the naive DFT's roundoff
        let peak = oracle.iter().fold(f64::MIN, |a, &b| a.max(b)).exp();
        for (a, b) in row.iter().zip(&oracle) {
            assert!((a.exp() - b.exp()).abs() < 1e-12 * peak, "{a} vs {b}");
        }
        let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let (lo, _, hi) = fe.band_edges(arg);
        assert!(lo < 440.0 && 440.0 < hi, "peak band {arg}: {lo}..{hi}");
    }
}

#[test]
fn filterbank_is_triangular() {
    let fe = MelFrontEnd::new(MelConfig::default()).unwrap();
    let bin_hz = 16_000.0 / 512.0;
    for b in [0, 10, 79] {
        let (lo, c, hi) = fe.band_edges(b);
        for k in 0..257 {
            let f = k as f64 * bin_hz;
            let want = if f <= lo || f >= hi {
                0.0
            } else if f <= c {
                (f - lo) / (c - lo)
            } else {
                (hi - f) / (hi - c)
            };
            assert!((fe.weight(b, k) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn hop_shift_moves_one_frame() {
    let cfg = MelConfig::default();
    let w = noise(8_000, 2);
    let shifted = Waveform::new(w.samples[cfg.hop..].to_vec(), 16_000).unwrap();
    let a = mel_spectrogram(&w, &cfg).unwrap();
    let b = mel_spectrogram(&shifted, &cfg).unwrap();
    assert_eq!(b.frames, a.frames - 1);
    for m in 0..b.frames {
        for (x, y) in a.row(m + 1).iter().zip(b.row(m)) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn snr_is_exact_over_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..100 {
        let clean = noise(rng.random_range(400..4000), 100 + i);
        let n = noise(clean.len() + rng.random_range(0..100), 500 + i);
        let snr = rng.random_range(-20.0..20.0);
        let mixed = scale_noise_to_snr(&clean, &n, snr).unwrap();
        let added: Vec<f64> = mixed.samples.iter().zip(&clean.samples).map(|(m, c)| m - c).collect();
        let got = 10.0 * (clean.power() / power(&added)).log10();
        assert!((got - snr).abs() < 1e-6, "{got} vs {snr}");
    }
}

#[test]
fn mix_noise_formula() {
    let clean = Waveform::new(vec![0.2, -0.4, 0.6], 16_000).unwrap();
    let n = Waveform::new(vec![1.0, 1.0, 1.0], 16_000).unwrap();
    let m = mix_noise(&clean, &n, 0.25, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let want = [0.4, -0.05, 0.7];
    for (a, b) in m.samples.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

fn encoder(seed: u64) -> (AudioConfig, ParameterSet) {
    let cfg = AudioConfig {
        n_mels: 6,
        channels: 4,
        dim: 3,
        ..AudioConfig::default()
    };
    let mut p = ParameterSet::new();
    init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
    (cfg, p)
}

fn random_mel(frames: usize, bands: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![frames, bands], (0..frames * bands).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn pool_for(frames: usize, video: usize) -> Tensor {
    pooling_matrix(&MelConfig::default(), frames, 25.0, video).unwrap()
}

#[test]
fn identical_inputs_give_identical_embeddings() {
    let (_, p) = encoder(1);
    let mel = random_mel(20, 6, 2);
    let mut g = Graph::new();
    let a = g.constant(mel.clone());
    let m = g.constant(mel);
    let pool = g.constant(pool_for(20, 2));
    let (za, zm) = psa_forward(&mut g, &p, a, m, pool).unwrap();
    assert_eq!(g.value(za).data(), g.value(zm).data());
    let l = consistency_loss(&mut g, za, zm).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn one_parameter_set_drives_both_paths() {
    let (_, mut p) = encoder(1);
    let (ma, mm) = (random_mel(20, 6, 2), random_mel(20, 6, 3));
    let outputs = |p: &ParameterSet| {
        let mut g = Graph::new();
        let a = g.constant(ma.clone());
        let m = g.constant(mm.clone());
        let pool = g.constant(pool_for(20, 2));
        let (za, zm) = psa_forward(&mut g, p, a, m, pool).unwrap();
        (g.value(za).clone(), g.value(zm).clone())
    };
    let (a0, m0) = outputs(&p);
    p.value_mut("audio.head.b").unwrap().data_mut()[0] += 0.5;
    let (a1, m1) = outputs(&p);
    assert!(a0.max_abs_diff(&a1) > 0.1 && m0.max_abs_diff(&m1) > 0.1);
    assert_eq!(p.names().filter(|n| n.starts_with("audio.")).count(), 6);
}

#[test]
fn consistency_loss_loop_oracle() {
    let (za, zm) = (random_mel(4, 3, 7), random_mel(4, 3, 8));
    let mut want = 0.0;
    for t in 0..4 {
        for d in 0..3 {
            let e = za.get2(t, d) - zm.get2(t, d);
            want += e * e;
        }
    }
    let mut g = Graph::new();
    let a = g.constant(za);
    let m = g.constant(zm);
    let l = consistency_loss(&mut g, a, m).unwrap();
    assert!((g.value(l).item() - want).abs() < 1e-14);
}

#[test]
fn gradient_through_both_paths() {
    let (_, p) = encoder(4);
    let (ma, mm) = (random_mel(14, 6, 5), random_mel(14, 6, 6));
    let w = random_mel(2, 3, 9);
    let report = check_params(&p, 1e-6, |g, ps| {
        let a = g.constant(ma.clone());
        let m = g.constant(mm.clone());
        let pool = g.constant(pool_for(14, 2));
        let (za, zm) = psa_forward(g, ps, a, m, pool).map_err(|e| numkit::NumError::Contract(e.to_string()))?;
        let l = consistency_loss(g, za, zm).map_err(|e| numkit::NumError::Contract(e.to_string()))?;
        let wc = g.constant(w.clone());
        let t = g.mul(za, wc)?;
        let t = g.sum(t)?;
        g.add(l, t)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn pooling_rows_are_averages() {
    let cfg = MelConfig::default();
    let frames = cfg.frame_count(16_000 * 2);
    let m = pool_for(frames, 50);
    assert_eq!(m.shape(), &[50, conv_frames(frames)]);
    for t in 0..50 {
        let row = m.row(t);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let nz: Vec<f64> = row.iter().copied().filter(|&x| x > 0.0).collect();
        assert!(nz.iter().all(|&x| (x - nz[0]).abs() < 1e-15));
    }
}

proptest! {
    #[test]
    fn mixing_stays_in_range(gamma in 0.0f64..=1.0, seed in any::<u64>()) {
        let clean = noise(300, seed);
        let n = noise(400, seed.wrapping_add(1));
        let m = mix_noise(&clean, &n, gamma, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(m.len(), 300);
        prop_assert!(m.samples.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn snr_holds_for_any_level(snr in -30.0f64..30.0, seed in any::<u64>()) {
        let clean = noise(800, seed);
        let n = noise(800, seed ^ 0xabc);
        let mixed = scale_noise_to_snr(&clean, &n, snr).unwrap();
        let added: Vec<f64> = mixed.samples.iter().zip(&clean.samples).map(|(m, c)| m - c).collect();
        prop_assert!((10.0 * (clean.power() / power(&added)).log10() - snr).abs() < 1e-6);
    }
}
