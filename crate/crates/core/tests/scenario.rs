use ttm_core::rng::stream;
use ttm_core::scenario::*;
use ttm_core::vmma::missing_ratio;
use ttm_core::CoreError;

fn small() -> ScenarioConfig {
    ScenarioConfig {
        frames: 30,
        head_dim: 8,
        lip_height: 8,
        lip_width: 8,
        train: 6,
        val: 2,
        test: 2,
        seed: 17,
        ..ScenarioConfig::default()
    }
}

fn always_speaking(yaw_deg: f64) -> ScenarioConfig {
    ScenarioConfig {
        persons: 1,
        speech_start: 1.0,
        speech_stop: 0.0,
        fixed_yaw_deg: Some(yaw_deg),
        ..small()
    }
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ttmd"), dir.path().join("b.ttmd"));
    write_dataset(&generate(&small(), Split::Train).unwrap(), &a).unwrap();
    write_dataset(&generate(&small(), Split::Train).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let other = ScenarioConfig { seed: 18, ..small() };
    assert_ne!(generate(&other, Split::Train).unwrap(), generate(&small(), Split::Train).unwrap());
}

#[test]
fn splits_differ() {
    let [train, val, _] = generate_splits(&small()).unwrap();
    assert_ne!(train.sequences[0].audio, val.sequences[0].audio);
}

#[test]
fn parallel_generation_matches_serial() {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let serial = pool.install(|| generate(&small(), Split::Train).unwrap());
    let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let parallel = pool4.install(|| generate(&small(), Split::Train).unwrap());
    assert_eq!(serial, parallel);
}

#[test]
fn facing_speaker_is_always_positive() {
    let ds = generate(&always_speaking(0.0), Split::Train).unwrap();
    for s in &ds.sequences {
        assert!(s.labels.iter().all(|&y| y));
        assert!(s.truth.speaking.iter().all(|&y| y));
    }
}

#[test]
fn turned_away_speaker_is_negative() {
    let ds = generate(&always_speaking(180.0), Split::Train).unwrap();
    for s in &ds.sequences {
        assert!(s.labels.iter().all(|&y| !y));
    }
}

#[test]
fn labels_follow_speaking_and_yaw() {
    let cfg = small();
    let thr = (cfg.face_threshold_deg * std::f64::consts::PI / 180.0) as f32;
    for s in &generate(&cfg, Split::Train).unwrap().sequences {
        for t in 0..s.frames() {
            assert_eq!(s.labels[t], s.truth.speaking[t] && s.truth.yaw[t].abs() <= thr);
        }
    }
}

#[test]
fn addressee_swap_leaves_audio_unchanged() {
    let a = generate(&ScenarioConfig { target: 0, ..small() }, Split::Train).unwrap();
    let b = generate(&ScenarioConfig { target: 1, ..small() }, Split::Train).unwrap();
    let mut labels_differ = false;
    for (x, y) in a.sequences.iter().zip(&b.sequences) {
        assert_eq!(x.audio, y.audio);
        assert_eq!(x.truth.active, y.truth.active);
        labels_differ |= x.truth.speaking != y.truth.speaking;
    }
    assert!(labels_differ);
}

#[test]
fn default_generator_has_overlapping_speakers() {
    let cfg = ScenarioConfig {
        train: 40,
        lip_height: 8,
        lip_width: 8,
        ..ScenarioConfig::default()
    };
    let ds = generate(&cfg, Split::Train).unwrap();
    let (two, total) = ds.sequences.iter().fold((0, 0), |(a, n), s| {
        (a + s.truth.active.iter().filter(|&&k| k >= 2).count(), n + s.frames())
    });
    let frac = two as f64 / total as f64;
    assert!(frac >= 0.30, "two-speaker fraction {frac}");
}

#[test]
fn missing_rate_extremes() {
    for model in [MissingModel::Iid { rate: 0.0 }, MissingModel::Burst { rate: 0.0, mean_len: 5.0 }] {
        let m = presence_mask(&model, 100, &mut stream(1, &[]));
        assert!(m.iter().all(|&p| p));
    }
    for model in [MissingModel::Iid { rate: 1.0 }, MissingModel::Burst { rate: 1.0, mean_len: 5.0 }] {
        let m = presence_mask(&model, 100, &mut stream(1, &[]));
        assert_eq!(missing_ratio(&ttm_core::vmma::PresenceMask::new(m)).unwrap(), 1.0);
    }
}

#[test]
fn missing_fraction_concentrates() {
    let iid = presence_mask(&MissingModel::Iid { rate: 1.0 / 3.0 }, 10_000, &mut stream(2, &[]));
    let r = iid.iter().filter(|&&p| !p).count() as f64 / 1e4;
    assert!((r - 1.0 / 3.0).abs() < 0.02, "{r}");
    // bursts are correlated, so average over many independent chains
    let mut missing = 0;
    for k in 0..200 {
        let m = presence_mask(&MissingModel::default(), 500, &mut stream(3, &[k]));
        missing += m.iter().filter(|&&p| !p).count();
    }
    let r = missing as f64 / 1e5;
    assert!((r - 1.0 / 3.0).abs() < 0.02, "{r}");
}

#[test]
fn missing_frames_have_zero_features() {
    let ds = generate(&small(), Split::Train).unwrap();
    let d = ds.head_dim;
    let mut seen = 0;
    for s in &ds.sequences {
        for t in 0..s.frames() {
            let row = &s.head[t * d..(t + 1) * d];
            if !s.mask[t] {
                seen += 1;
                assert!(row.iter().all(|&v| v == 0.0));
            } else {
                assert!(row.iter().any(|&v| v != 0.0));
            }
        }
    }
    assert!(seen > 0);
}

#[test]
fn corruption_only_removes_frames() {
    let ds = generate(&small(), Split::Train).unwrap();
    let c = corrupt_presence(&ds, &MissingModel::Iid { rate: 0.5 }, 4).unwrap();
    let (mut before, mut after) = (0, 0);
    for (a, b) in ds.sequences.iter().zip(&c.sequences) {
        for t in 0..a.frames() {
            assert!(!(b.mask[t] && !a.mask[t]));
        }
        before += a.mask.iter().filter(|&&p| !p).count();
        after += b.mask.iter().filter(|&&p| !p).count();
        assert_eq!(a.audio, b.audio);
        assert_eq!(a.labels, b.labels);
    }
    assert!(after > before);
}

#[test]
fn format_round_trip() {
    let ds = generate(&small(), Split::Val).unwrap();
    let bytes = encode_dataset(&ds).unwrap();
    assert_eq!(&bytes[..MAGIC.len()], MAGIC);
    assert_eq!(decode_dataset(&bytes).unwrap(), ds);
}

#[test]
fn corrupt_files_are_rejected() {
    let ds = generate(&small(), Split::Val).unwrap();
    let bytes = encode_dataset(&ds).unwrap();
    let is_format = |b: &[u8]| matches!(decode_dataset(b), Err(CoreError::Format(_)));

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(is_format(&bad_magic));

    let mut bad_version = bytes.clone();
    bad_version[MAGIC.len()] = bad_version[MAGIC.len()].wrapping_add(1);
    assert!(is_format(&bad_version));

    for cut in [0, 3, MAGIC.len() + 2, bytes.len() / 2, bytes.len() - 1] {
        assert!(is_format(&bytes[..cut]), "truncated at {cut}");
    }

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(is_format(&trailing));

    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_dataset(dir.path().join("absent")), Err(CoreError::Io(_))));
}

#[test]
fn invalid_configs() {
    for cfg in [
        ScenarioConfig { persons: 0, ..small() },
        ScenarioConfig { target: 2, ..small() },
        ScenarioConfig { frames: 0, ..small() },
        ScenarioConfig { head_dim: 2, ..small() },
        ScenarioConfig { missing: MissingModel::Iid { rate: 1.5 }, ..small() },
        ScenarioConfig { missing: MissingModel::Burst { rate: 0.3, mean_len: 0.5 }, ..small() },
    ] {
        assert!(matches!(generate(&cfg, Split::Train), Err(CoreError::Config(_))));
    }
}

#[test]
fn noise_has_requested_rms() {
    for kind in [NoiseKind::White, NoiseKind::Pink, NoiseKind::Machinery, NoiseKind::Mixed] {
        let x = noise_samples(kind, 16_000, 16_000, 0.07, &mut stream(5, &[]));
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        assert!((rms - 0.07).abs() < 1e-12, "{kind:?}: {rms}");
    }
}
