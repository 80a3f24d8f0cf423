use numkit::{checkpoint, clip_grad_norm, Adam, AdamConfig, Graph, NumError, ParameterSet, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn single(value: f64, grad: f64) -> ParameterSet {
    let mut ps = ParameterSet::new();
    ps.insert("w", Tensor::scalar(value)).unwrap();
    ps.zero_grads();
    ps.accumulate_grad("w", &[grad]).unwrap();
    ps
}

#[test]
fn adam_zero_grads_leave_params_unchanged() {
    let mut ps = single(0.4, 0.0);
    let mut adam = Adam::new(AdamConfig::default());
    adam.step(&mut ps).unwrap();
    assert_eq!(ps.value("w").unwrap().item(), 0.4);
    assert_eq!(ps.step(), 1);
}

#[test]
fn adam_first_step_moves_by_lr() {
    // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps) ≈ lr.
    let lr = 1e-3;
    let mut ps = single(1.0, 1.0);
    let mut adam = Adam::new(AdamConfig { lr, ..Default::default() });
    adam.step(&mut ps).unwrap();
    let expected = 1.0 - lr * 1.0 / (1.0 + 1e-8);
    assert!((ps.value("w").unwrap().item() - expected).abs() < 1e-15);
    assert_eq!(ps.get("w").unwrap().grad.as_ref().unwrap().item(), 0.0);
}

#[test]
fn adam_requires_gradients() {
    let mut ps = ParameterSet::new();
    ps.insert("a", Tensor::scalar(1.0)).unwrap();
    ps.insert("b", Tensor::scalar(1.0)).unwrap();
    match Adam::new(AdamConfig::default()).step(&mut ps) {
        Err(NumError::Contract(msg)) => assert!(msg.contains('a') && msg.contains('b')),
        other => panic!("{other:?}"),
    }
}

fn train_quadratic(seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParameterSet::new();
    ps.insert("x", numkit::init::normal(&mut rng, &[5], 1.0)).unwrap();
    ps.insert("y", numkit::init::normal(&mut rng, &[2, 2], 1.0)).unwrap();
    ps.zero_grads();
    let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
    for _ in 0..20 {
        let mut g = Graph::new();
        let x = g.param(&ps, "x").unwrap();
        let y = g.param(&ps, "y").unwrap();
        let (sx, sy) = (g.square(x).unwrap(), g.tanh(y).unwrap());
        let (a, b) = (g.sum(sx).unwrap(), g.sum(sy).unwrap());
        let l = g.add(a, b).unwrap();
        g.backward(l, &mut ps).unwrap();
        clip_grad_norm(&mut ps, 1.0);
        adam.step(&mut ps).unwrap();
    }
    ps
}

#[test]
fn training_is_bit_identical_across_runs() {
    let a = checkpoint::encode(&train_quadratic(9));
    let b = checkpoint::encode(&train_quadratic(9));
    assert_eq!(a, b);
    assert_ne!(a, checkpoint::encode(&train_quadratic(10)));
}

fn with_grads(grads: &[f64]) -> ParameterSet {
    let mut ps = ParameterSet::new();
    ps.insert("g", Tensor::zeros(&[grads.len()])).unwrap();
    ps.accumulate_grad("g", grads).unwrap();
    ps
}

#[test]
fn clip_examples() {
    let mut ps = with_grads(&[0.3, 0.4]);
    assert!((clip_grad_norm(&mut ps, 1.0) - 0.5).abs() < 1e-15);
    assert_eq!(ps.get("g").unwrap().grad.as_ref().unwrap().data(), &[0.3, 0.4]);

    let mut ps = with_grads(&[3.0, 4.0]);
    assert_eq!(clip_grad_norm(&mut ps, 1.0), 5.0);
    let g = ps.get("g").unwrap().grad.as_ref().unwrap().data().to_vec();
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
}

proptest! {
    #[test]
    fn clipped_norm_is_bounded(grads in prop::collection::vec(-100.0f64..100.0, 1..20), max in 0.01f64..5.0) {
        let mut ps = with_grads(&grads);
        let before = clip_grad_norm(&mut ps, max);
        let expect: f64 = grads.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((before - expect).abs() < 1e-9);
        prop_assert!(ps.grad_norm() <= max + 1e-12 || ps.grad_norm() <= before);
        prop_assert!(ps.grad_norm() <= max.max(before) + 1e-12);
        if before > max {
            prop_assert!((ps.grad_norm() - max).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..3), 1..5),
        step in any::<u64>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new();
        for (i, s) in shapes.iter().enumerate() {
            ps.insert(format!("layer{i}.w"), numkit::init::normal(&mut rng, s, 3.0)).unwrap();
        }
        ps.set_step(step);
        let bytes = checkpoint::encode(&ps);
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &ps);
        prop_assert_eq!(checkpoint::encode(&back), bytes);
    }
}

#[test]
fn checkpoint_file_round_trip_and_corruption() {
    let ps = train_quadratic(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ckpt");
    checkpoint::save(&ps, &path).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap().value("x").unwrap(), ps.value("x").unwrap());

    let mut bytes = checkpoint::encode(&ps);
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(checkpoint::decode(&bytes), Err(NumError::Format(_))));
    let mut bad = checkpoint::encode(&ps);
    bad[0] = b'X';
    assert!(checkpoint::decode(&bad).is_err());
}
