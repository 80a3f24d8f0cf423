//! Every differentiable op against central finite differences, 100 seeds each.

use numkit::gradcheck::check_inputs;
use numkit::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;
const SEEDS: u64 = 100;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    numkit::init::normal(rng, shape, 1.0)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap()
}

/// Contract an op's output with a fixed random weighting so every output
/// entry carries a distinct upstream gradient.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = g.constant(numkit::init::normal(&mut rng, g.shape(y), 1.0));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn sweep<M, F>(name: &str, make: M, f: F)
where
    M: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Copy,
{
    sweep_tol(name, TOL, make, f)
}

fn sweep_tol<M, F>(name: &str, tol: f64, make: M, f: F)
where
    M: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Copy,
{
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let report = check_inputs(&inputs, EPS, |g, v| {
            let y = f(g, v)?;
            weighted(g, y, seed)
        })
        .unwrap();
        worst = worst.max(report.max_rel_err);
    }
    assert!(worst < tol, "{name}: max relative error {worst:e}");
}

#[test]
fn matmul() {
    sweep("matmul", |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn elementwise_binary() {
    let mk = |r: &mut ChaCha8Rng| vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])];
    sweep("add", mk, |g, v| g.add(v[0], v[1]));
    sweep("sub", mk, |g, v| g.sub(v[0], v[1]));
    sweep("mul", mk, |g, v| g.mul(v[0], v[1]));
}

#[test]
fn broadcasts() {
    sweep("add_row", |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4])], |g, v| g.add_row(v[0], v[1]));
    sweep("mul_col", |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 1])], |g, v| g.mul_col(v[0], v[1]));
}

#[test]
fn scalar_affine_and_reductions() {
    let mk = |r: &mut ChaCha8Rng| vec![rand_t(r, &[3, 2])];
    sweep("scale", mk, |g, v| g.scale(v[0], -1.7));
    sweep("add_scalar", mk, |g, v| g.add_scalar(v[0], 0.3));
    sweep("sum_last", mk, |g, v| g.sum_last(v[0]));
    sweep("mean", mk, |g, v| {
        let m = g.mean(v[0])?;
        g.square(m)
    });
    sweep("sum", mk, |g, v| {
        let s = g.sum(v[0])?;
        g.tanh(s)
    });
    sweep("transpose", mk, |g, v| g.transpose(v[0]));
    sweep("reshape", mk, |g, v| g.reshape(v[0], &[6]));
}

#[test]
fn unary() {
    let mk = |r: &mut ChaCha8Rng| vec![rand_t(r, &[2, 3])];
    let pos = |r: &mut ChaCha8Rng| vec![positive(r, &[2, 3])];
    sweep("exp", mk, |g, v| g.exp(v[0]));
    sweep("tanh", mk, |g, v| g.tanh(v[0]));
    sweep("sigmoid", mk, |g, v| g.sigmoid(v[0]));
    sweep("gelu", mk, |g, v| g.gelu(v[0]));
    sweep("square", mk, |g, v| g.square(v[0]));
    sweep("ln", pos, |g, v| g.ln(v[0]));
    sweep("sqrt", pos, |g, v| g.sqrt(v[0]));
    sweep("recip", pos, |g, v| g.recip(v[0]));
    sweep("powf", pos, |g, v| g.powf(v[0], 2.5));
    // keep inputs away from the kinks
    let away = |r: &mut ChaCha8Rng| {
        let t = rand_t(r, &[2, 3]);
        let d = t.data().iter().map(|&x| if x.abs() < 0.1 { x + 0.3 } else { x }).collect();
        vec![Tensor::new(vec![2, 3], d).unwrap()]
    };
    sweep("relu", away, |g, v| g.relu(v[0]));
    sweep("clamp", away, |g, v| g.clamp(v[0], -0.05, 0.05));
}

#[test]
fn softmax_and_layer_norm() {
    sweep("softmax rows", |r| vec![rand_t(r, &[3, 5])], |g, v| g.softmax(v[0], 1));
    sweep("softmax cols", |r| vec![rand_t(r, &[3, 5])], |g, v| g.softmax(v[0], 0));
    sweep(
        "layer_norm",
        |r| vec![rand_t(r, &[3, 5]), rand_t(r, &[5]), rand_t(r, &[5])],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn structural() {
    sweep("slice_cols", |r| vec![rand_t(r, &[3, 5])], |g, v| g.slice_cols(v[0], 1, 4));
    sweep("slice_rows", |r| vec![rand_t(r, &[4, 2])], |g, v| g.slice_rows(v[0], 1, 3));
    sweep(
        "concat_cols",
        |r| vec![rand_t(r, &[3, 2]), rand_t(r, &[3, 1])],
        |g, v| g.concat_cols(&[v[0], v[1], v[0]]),
    );
    sweep(
        "concat_rows",
        |r| vec![rand_t(r, &[1, 3]), rand_t(r, &[2, 3])],
        |g, v| g.concat_rows(&[v[1], v[0]]),
    );
    sweep("gather_rows", |r| vec![rand_t(r, &[3, 2])], |g, v| g.gather_rows(v[0], &[2, 0, 2, 1]));
    sweep("unfold_rows", |r| vec![rand_t(r, &[7, 2])], |g, v| g.unfold_rows(v[0], 3, 2));
    sweep("cross3", |r| vec![rand_t(r, &[4, 3]), rand_t(r, &[4, 3])], |g, v| g.cross3(v[0], v[1]));
}

#[test]
fn attention() {
    sweep(
        "attention",
        |r| vec![rand_t(r, &[4, 6]), rand_t(r, &[6, 6]), rand_t(r, &[6, 4])],
        |g, v| g.attention(v[0], v[1], v[2], 2, 2),
    );
    sweep(
        "self attention",
        |r| vec![rand_t(r, &[3, 4])],
        |g, v| g.attention(v[0], v[0], v[0], 1, 1),
    );
}

// Stacked curvature (gelu into layer norm) puts the central-difference
// truncation term near 1e-6 on a few seeds, so the chain is held to the
// full-model tolerance instead.
#[test]
fn composite_chain() {
    sweep_tol(
        "mlp + norm + attention",
        1e-5,
        |r| vec![rand_t(r, &[4, 3]), rand_t(r, &[3, 4]), rand_t(r, &[4])],
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let h = g.gelu(h)?;
            let ones = g.constant(Tensor::filled(&[4], 1.0));
            let zeros = g.constant(Tensor::zeros(&[4]));
            let n = g.layer_norm(h, ones, zeros, 1e-5)?;
            let a = g.attention(n, n, h, 2, 1)?;
            g.add(a, h)
        },
    );
}
