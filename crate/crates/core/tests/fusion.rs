use numkit::{Graph, ParameterSet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttm_core::fusion::*;
use ttm_core::model::{StreamSet, Variant};
use ttm_core::scenario::{generate, MissingModel, Split};
use ttm_core::vmma::PromptMode;
use ttm_core::{RunConfig, TtmModel};

fn rand_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn block(dim: usize, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    insert_cross_attention(&mut p, &mut rng, "x", dim).unwrap();
    for proj in ["q", "k", "v"] {
        let b = p.value_mut(&format!("x.{proj}.b")).unwrap();
        for v in b.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    p
}

fn project(x: &Tensor, p: &ParameterSet, name: &str) -> Vec<Vec<f64>> {
    let w = p.value(&format!("x.{name}.w")).unwrap();
    let b = p.value(&format!("x.{name}.b")).unwrap().data();
    let (t, d) = x.dims2().unwrap();
    (0..t)
        .map(|i| (0..d).map(|j| b[j] + (0..d).map(|k| x.get2(i, k) * w.get2(k, j)).sum::<f64>()).collect())
        .collect()
}

fn attention_oracle(q: &Tensor, kv: &Tensor, p: &ParameterSet, heads: usize) -> Vec<Vec<f64>> {
    let (qs, ks, vs) = (project(q, p, "q"), project(kv, p, "k"), project(kv, p, "v"));
    let (t, d) = q.dims2().unwrap();
    let dh = d / heads;
    let mut out: Vec<Vec<f64>> = (0..t).map(|i| q.row(i).to_vec()).collect();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| cols.clone().map(|c| qs[i][c] * ks[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..t {
                let w = scores[j].exp() / z;
                for c in cols.clone() {
                    out[i][c] += w * vs[j][c];
                }
            }
        }
    }
    out
}

fn run_block(q: &Tensor, kv: &Tensor, p: &ParameterSet, heads: usize) -> Tensor {
    let mut g = Graph::new();
    let qv = g.constant(q.clone());
    let kvv = g.constant(kv.clone());
    let o = cross_attention(&mut g, p, "x", qv, kvv, heads).unwrap();
    g.value(o).clone()
}

#[test]
fn cross_attention_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = block(8, 2);
    let (q, kv) = (rand_tensor(3, 8, &mut rng), rand_tensor(3, 8, &mut rng));
    let got = run_block(&q, &kv, &p, 2);
    let want = attention_oracle(&q, &kv, &p, 2);
    for i in 0..3 {
        for c in 0..8 {
            assert!((got.get2(i, c) - want[i][c]).abs() < 1e-10);
        }
    }
}

#[test]
fn single_frame_takes_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = block(4, 4);
    let (q, kv) = (rand_tensor(1, 4, &mut rng), rand_tensor(1, 4, &mut rng));
    let got = run_block(&q, &kv, &p, 2);
    let v = project(&kv, &p, "v");
    for c in 0..4 {
        assert!((got.get2(0, c) - (q.get2(0, c) + v[0][c])).abs() < 1e-15);
    }
}

#[test]
fn identical_keys_average_the_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = block(4, 6);
    p.value_mut("x.k.w").unwrap().data_mut().fill(0.0);
    let (q, kv) = (rand_tensor(5, 4, &mut rng), rand_tensor(5, 4, &mut rng));
    let got = run_block(&q, &kv, &p, 2);
    let v = project(&kv, &p, "v");
    for i in 0..5 {
        for c in 0..4 {
            let mean = (0..5).map(|j| v[j][c]).sum::<f64>() / 5.0;
            assert!((got.get2(i, c) - (q.get2(i, c) + mean)).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let (q, k, v) = (rand_tensor(6, 8, &mut rng), rand_tensor(6, 8, &mut rng), rand_tensor(6, 8, &mut rng));
    let (q, k, v) = (g.constant(q), g.constant(k), g.constant(v));
    let a = g.attention(q, k, v, 4, 1).unwrap();
    let probs = g.attention_probs(a).unwrap();
    assert_eq!(probs.len(), 4 * 6 * 6);
    for row in probs.chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&w| w > 0.0));
    }
}

#[test]
fn width_must_split_into_heads() {
    let p = block(6, 0);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 6]));
    assert!(cross_attention(&mut g, &p, "x", x, x, 4).is_err());
}

fn agg(a: &Tensor, b: &Tensor, c: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let (a, b, c) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(c.clone()));
    let s = aggregate(&mut g, a, b, c).unwrap();
    g.value(s).clone()
}

#[test]
fn aggregate_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = Tensor::zeros(&[3, 4]);
    assert_eq!(agg(&z, &z, &z), z);
    let x = rand_tensor(3, 4, &mut rng);
    let neg = Tensor::new(vec![3, 4], x.data().iter().map(|v| -v).collect()).unwrap();
    assert_eq!(agg(&x, &neg, &z), z);
    let (a, b, c) = (rand_tensor(3, 4, &mut rng), rand_tensor(3, 4, &mut rng), rand_tensor(3, 4, &mut rng));
    let s = agg(&a, &b, &c);
    for i in 0..12 {
        assert!((s.data()[i] - (a.data()[i] + b.data()[i] + c.data()[i])).abs() < 1e-12);
    }
    let mut g = Graph::new();
    let (a, b) = (g.constant(a), g.constant(Tensor::zeros(&[2, 4])));
    assert!(aggregate(&mut g, a, a, b).is_err());
}

fn fusion_params(cfg: &FusionConfig, seed: u64) -> ParameterSet {
    let mut p = ParameterSet::new();
    init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(seed), cfg, 3, 5, 6).unwrap();
    p
}

fn fuse_scores(cfg: &FusionConfig, p: &ParameterSet, inputs: [&Tensor; 4]) -> Vec<f64> {
    let mut g = Graph::new();
    let [h, l, a, pr] = inputs.map(|t| g.constant(t.clone()));
    let out = fuse_forward(&mut g, p, cfg, h, l, a, pr).unwrap();
    g.value(out.scores).data().to_vec()
}

#[test]
fn zero_inputs_score_one_half() {
    let cfg = FusionConfig {
        dim: 8,
        heads: 2,
        layers: 2,
        self_heads: 4,
    };
    let p = fusion_params(&cfg, 1);
    let s = fuse_scores(
        &cfg,
        &p,
        [&Tensor::zeros(&[4, 3]), &Tensor::zeros(&[4, 5]), &Tensor::zeros(&[4, 6]), &Tensor::zeros(&[4, 8])],
    );
    assert_eq!(s, vec![0.5; 4]);
}

#[test]
fn mismatched_stream_lengths() {
    let cfg = FusionConfig {
        dim: 8,
        heads: 2,
        layers: 1,
        self_heads: 2,
    };
    let p = fusion_params(&cfg, 1);
    let mut g = Graph::new();
    let h = g.constant(Tensor::zeros(&[4, 3]));
    let l = g.constant(Tensor::zeros(&[3, 5]));
    let a = g.constant(Tensor::zeros(&[4, 6]));
    let pr = g.constant(Tensor::zeros(&[4, 8]));
    assert!(fuse_forward(&mut g, &p, &cfg, h, l, a, pr).is_err());
}

#[test]
fn logit_shift_keeps_decisions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits: Vec<f64> = (0..50).map(|_| rng.random_range(-4.0..4.0)).collect();
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let base: Vec<bool> = logits.iter().map(|&z| sig(z) >= 0.5).collect();
    for c in [-3.0, 0.7, 5.0] {
        let thr = sig(c);
        let shifted: Vec<bool> = logits.iter().map(|&z| sig(z + c) >= thr).collect();
        assert_eq!(shifted, base);
    }
}

fn focal(p: &[f64], y: &[f64], alpha: f64, gamma: f64) -> f64 {
    let mut g = Graph::new();
    let s = g.constant(Tensor::new(vec![p.len(), 1], p.to_vec()).unwrap());
    let l = focal_loss(&mut g, s, y, alpha, gamma).unwrap();
    g.value(l).item()
}

#[test]
fn focal_hand_value() {
    assert!((focal(&[0.5], &[1.0], 0.25, 2.0) - 0.0433217).abs() < 1e-7);
    assert!(focal(&[1.0 - 1e-12], &[1.0], 0.25, 2.0) < 1e-12);
}

#[test]
fn zero_prompt_without_gaps_equals_prompt_off() {
    let mut rc = RunConfig::tiny();
    rc.scenario.missing = MissingModel::Iid { rate: 0.0 };
    rc.model.vmma.mode = PromptMode::Fine;
    let train = generate(&rc.scenario, Split::Train).unwrap();
    let on = TtmModel::new(rc.model.clone(), Variant::FULL, &train, 3).unwrap();
    let off_variant = Variant {
        vmma: false,
        streams: StreamSet::All,
        ..Variant::FULL
    };
    let off = TtmModel::new(rc.model.clone(), off_variant, &train, 3).unwrap();
    assert_eq!(on.params, off.params);
    for (a, b) in on.prepare(&train).unwrap().iter().zip(off.prepare(&train).unwrap().iter()) {
        assert!(a.prompt.data().iter().all(|&v| v == 0.0));
        assert_eq!(on.predict(a, None).unwrap(), off.predict(b, None).unwrap());
    }
}

proptest! {
    #[test]
    fn scores_in_unit_interval(seed in any::<u64>()) {
        let cfg = FusionConfig { dim: 8, heads: 2, layers: 1, self_heads: 2 };
        let p = fusion_params(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, l, a) = (rand_tensor(5, 3, &mut rng), rand_tensor(5, 5, &mut rng), rand_tensor(5, 6, &mut rng));
        let pr = Tensor::new(vec![5, 8], (0..40).map(|_| rng.random_range(0..2) as f64).collect()).unwrap();
        let s = fuse_scores(&cfg, &p, [&h, &l, &a, &pr]);
        prop_assert!(s.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn aggregate_is_linear(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [a, b, c, d] = [0; 4].map(|_| rand_tensor(3, 4, &mut rng));
        let ab = Tensor::new(vec![3, 4], a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap();
        let lhs = agg(&ab, &c, &d);
        let rhs = agg(&a, &c, &d);
        for i in 0..12 {
            prop_assert!((lhs.data()[i] - (rhs.data()[i] + b.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_without_focusing_is_half_bce(
        p in prop::collection::vec(0.001f64..0.999, 1..20),
        bits in prop::collection::vec(any::<bool>(), 20),
    ) {
        let y: Vec<f64> = bits[..p.len()].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let bce = p.iter().zip(&y).map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum::<f64>() / p.len() as f64;
        prop_assert!((focal(&p, &y, 0.5, 0.0) - 0.5 * bce).abs() < 1e-12);
    }
}
