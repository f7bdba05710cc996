use evitraffic::tensor::{special, Graph, OpKind, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-5;
/// Denominator floor so gradients that are numerically zero compare absolutely.
const REL_FLOOR: f64 = 1e-3;
const POINTS: usize = 10;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Builds `sum(w ⊙ f(inputs))` with fixed random `w` so every output element
/// contributes a distinct weight to the gradient.
fn weighted_loss(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod).unwrap()
}

/// Checks analytic against central-difference gradients for every input.
fn check<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let loss = weighted_loss(&mut g, out, 99);
        g.value(loss).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    let loss = weighted_loss(&mut g, out, 99);
    let grads = g.backward(loss).unwrap();

    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap();
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            minus[k].data_mut()[i] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
            assert!(rel < REL_TOL, "{name}: input {k}[{i}] analytic {a} fd {fd} rel {rel}");
        }
    }
}

fn unary(name: &str, op: OpKind, lo: f64, hi: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for _ in 0..POINTS {
        let x = rand_tensor(&mut rng, &[2, 3], lo, hi);
        let op = op.clone();
        check(name, &[x], move |g, v| g.apply(op.clone(), v).unwrap());
    }
}

fn binary(name: &str, op: OpKind, a_shape: &[usize], b_shape: &[usize], lo: f64, hi: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 104_729 + a_shape.len() as u64);
    for _ in 0..POINTS {
        let a = rand_tensor(&mut rng, a_shape, lo, hi);
        let b = rand_tensor(&mut rng, b_shape, lo, hi);
        let op = op.clone();
        check(name, &[a, b], move |g, v| g.apply(op.clone(), v).unwrap());
    }
}

#[test]
fn elementwise_unary_primitives() {
    unary("exp", OpKind::Exp, -2.0, 2.0);
    unary("log", OpKind::Log, 0.2, 3.0);
    unary("tanh", OpKind::Tanh, -2.0, 2.0);
    unary("sigmoid", OpKind::Sigmoid, -4.0, 4.0);
    unary("softplus", OpKind::Softplus, -4.0, 4.0);
    unary("abs", OpKind::Abs, 0.1, 2.0);
    unary("abs-neg", OpKind::Abs, -2.0, -0.1);
    unary("square", OpKind::Square, -2.0, 2.0);
    unary("sqrt", OpKind::Sqrt, 0.2, 4.0);
    unary("lgamma", OpKind::Lgamma, 0.3, 20.0);
    unary("neg", OpKind::Neg, -2.0, 2.0);
    unary("scale", OpKind::Scale(-1.7), -2.0, 2.0);
    unary("add-scalar", OpKind::AddScalar(0.3), -2.0, 2.0);
    unary("clamp-inside", OpKind::Clamp { min: -5.0, max: 5.0 }, -2.0, 2.0);
    unary("clamp-outside", OpKind::Clamp { min: 3.0, max: 5.0 }, -2.0, 2.0);
}

#[test]
fn elementwise_binary_primitives() {
    for (a, b) in [(&[2usize, 3][..], &[2usize, 3][..]), (&[2, 3], &[3]), (&[4, 1], &[1, 3]), (&[1], &[2, 2])] {
        binary("add", OpKind::Add, a, b, -2.0, 2.0);
        binary("sub", OpKind::Sub, a, b, -2.0, 2.0);
        binary("mul", OpKind::Mul, a, b, -2.0, 2.0);
        binary("div", OpKind::Div, a, b, 0.5, 2.0);
    }
}

#[test]
fn matmul_shapes() {
    binary("matmul", OpKind::MatMul, &[3, 4], &[4, 2], -1.0, 1.0);
    binary("matmul-batched-left", OpKind::MatMul, &[2, 3, 4], &[4, 2], -1.0, 1.0);
    binary("matmul-batched-right", OpKind::MatMul, &[3, 4], &[2, 4, 2], -1.0, 1.0);
    binary("matmul-batched-both", OpKind::MatMul, &[2, 3, 4], &[2, 4, 2], -1.0, 1.0);
}

#[test]
fn structural_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..POINTS {
        let a = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 2], -1.0, 1.0);
        check("concat", &[a.clone(), b], |g, v| g.concat(v, 1).unwrap());
        check("slice", &[a.clone()], |g, v| g.slice(v[0], 1, 1, 3).unwrap());
        check("sum", &[a.clone()], |g, v| g.sum(v[0]).unwrap());
        check("sum-axis", &[a.clone()], |g, v| g.sum_axis(v[0], 0).unwrap());
        check("mean", &[a.clone()], |g, v| g.mean(v[0]).unwrap());
        check("mean-axis", &[a.clone()], |g, v| g.mean_axis(v[0], 1).unwrap());
        check("softmax-0", &[a.clone()], |g, v| g.softmax(v[0], 0).unwrap());
        check("softmax-1", &[a.clone()], |g, v| g.softmax(v[0], 1).unwrap());
        check("broadcast", &[a.clone()], |g, v| g.broadcast(v[0], &[4, 2, 3]).unwrap());
        check("reshape", &[a.clone()], |g, v| g.reshape(v[0], &[3, 2]).unwrap());
        check("transpose", &[a], |g, v| g.transpose(v[0]).unwrap());
    }
}

#[test]
fn three_layer_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..POINTS {
        let inputs = vec![
            rand_tensor(&mut rng, &[4, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[3, 5], -1.0, 1.0),
            rand_tensor(&mut rng, &[5], -0.5, 0.5),
            rand_tensor(&mut rng, &[5, 4], -1.0, 1.0),
            rand_tensor(&mut rng, &[4], -0.5, 0.5),
            rand_tensor(&mut rng, &[4, 2], -1.0, 1.0),
        ];
        check("composite", &inputs, |g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.add(h, v[2]).unwrap();
            let h = g.tanh(h).unwrap();
            let h = g.matmul(h, v[3]).unwrap();
            let h = g.add(h, v[4]).unwrap();
            let h = g.sigmoid(h).unwrap();
            let h = g.matmul(h, v[5]).unwrap();
            let h = g.softplus(h).unwrap();
            let s = g.softmax(h, 1).unwrap();
            g.mul(h, s).unwrap()
        });
    }
}

/// `ln Γ(x)` via upward shift to `x ≥ 20` and the Stirling series through the
/// `B₁₆` term. Shares nothing with the Lanczos implementation.
fn lgamma_stirling(x: f64) -> f64 {
    let mut z = x;
    let mut shift = 0.0;
    while z < 20.0 {
        shift += z.ln();
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // B_{2k} / (2k(2k−1))
    let coef = [
        1.0 / 12.0,
        -1.0 / 360.0,
        1.0 / 1260.0,
        -1.0 / 1680.0,
        1.0 / 1188.0,
        -691.0 / 360_360.0,
        1.0 / 156.0,
        -3617.0 / 122_400.0,
    ];
    let mut series = 0.0;
    let mut p = inv;
    for c in coef {
        series += c * p;
        p *= inv2;
    }
    (z - 0.5) * z.ln() - z + 0.5 * (2.0 * std::f64::consts::PI).ln() + series - shift
}

#[test]
fn lgamma_matches_independent_oracle() {
    let mut worst: f64 = 0.0;
    let n = 5000;
    for i in 0..=n {
        let x = 0.1 + (50.0 - 0.1) * i as f64 / n as f64;
        worst = worst.max((special::lgamma(x) - lgamma_stirling(x)).abs());
    }
    assert!(worst < 1e-10, "max abs error {worst}");
    assert!((lgamma_stirling(0.5) - 0.572_364_942_924_700_1).abs() < 1e-13);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&mut rng, &[8, 6], -1.0, 1.0), true);
        let w = g.leaf(rand_tensor(&mut rng, &[6, 6], -1.0, 1.0), true);
        let h = g.matmul(x, w).unwrap();
        let h = g.tanh(h).unwrap();
        let h = g.softmax(h, 1).unwrap();
        let h = g.add_scalar(h, 1.0).unwrap();
        let h = g.lgamma(h).unwrap();
        let s = g.mean(h).unwrap();
        let grads = g.backward(s).unwrap();
        let mut bits: Vec<u64> = g.value(h).data().iter().map(|v| v.to_bits()).collect();
        bits.extend(grads.get(w).unwrap().data().iter().map(|v| v.to_bits()));
        bits
    };
    assert_eq!(run(), run());
}
