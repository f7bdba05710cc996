use std::f64::consts::PI;

use evitraffic::evidential::{
    decompose, nig_log_density, nll_loss, nll_loss_graph, ratio_regularizer, ratio_regularizer_graph,
    student_t_log_pdf, total_loss, total_loss_graph, NigParams, NigVars, RegularizerMode, MAD_CONSTANT,
};
use evitraffic::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, StudentsT};

fn p(l: f64, n: f64, a: f64, b: f64) -> NigParams {
    NigParams::new(l, n, a, b).unwrap()
}

/// Composite Simpson weights for `n` (odd) nodes on `[a, b]`.
fn simpson(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    assert!(n % 2 == 1);
    let h = (b - a) / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let w = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            (a + i as f64 * h, w * h / 3.0)
        })
        .collect()
}

/// `∫∫ N(x; μ, σ²) NIG(μ, σ² | p) dμ dσ²`, integrating `σ²` in log space.
fn marginal_by_quadrature(x: f64, prm: &NigParams) -> f64 {
    let mode = (prm.beta / (prm.alpha + 1.0)).ln();
    let s_nodes = simpson(mode - 8.0, mode + 40.0 / prm.alpha, 801);
    let mut total = 0.0;
    for (s, ws) in s_nodes {
        let sigma2 = s.exp();
        let sd = sigma2.sqrt() * (1.0 + 1.0 / prm.nu.sqrt());
        let lo = prm.lambda.min(x) - 12.0 * sd;
        let hi = prm.lambda.max(x) + 12.0 * sd;
        let mut inner = 0.0;
        for (mu, wm) in simpson(lo, hi, 401) {
            let log_n = -0.5 * (2.0 * PI * sigma2).ln() - (x - mu).powi(2) / (2.0 * sigma2);
            inner += wm * (log_n + nig_log_density(mu, sigma2, prm).unwrap()).exp();
        }
        total += ws * inner * sigma2;
    }
    total
}

#[test]
fn marginalization_matches_student_t() {
    let settings = [
        p(0.0, 1.0, 2.0, 1.0),
        p(60.0, 0.5, 3.0, 20.0),
        p(-1.0, 4.0, 1.5, 0.5),
        p(2.0, 2.0, 5.0, 8.0),
        p(100.0, 10.0, 2.5, 3.0),
    ];
    for prm in settings {
        let scale = prm.student_scale2().sqrt();
        for k in -3..=3 {
            let x = prm.lambda + k as f64 * scale;
            let quad = marginal_by_quadrature(x, &prm);
            let closed = student_t_log_pdf(x, &prm).unwrap().exp();
            assert!((quad - closed).abs() < 1e-4, "{prm:?} x={x}: quad {quad} closed {closed}");
        }
    }
}

#[test]
fn student_t_against_statrs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let prm = p(rng.gen_range(-5.0..5.0), rng.gen_range(0.1..10.0), rng.gen_range(1.01..8.0), rng.gen_range(0.1..10.0));
        let t = StudentsT::new(prm.lambda, prm.student_scale2().sqrt(), 2.0 * prm.alpha).unwrap();
        let x = rng.gen_range(-10.0..10.0);
        assert!((student_t_log_pdf(x, &prm).unwrap() - t.ln_pdf(x)).abs() < 1e-10);
    }
    // dof 4, unit scale: Γ(5/2)/(2√π Γ(2)) = 3/8
    assert!((student_t_log_pdf(0.0, &p(0.0, 1.0, 2.0, 1.0)).unwrap() - 0.375f64.ln()).abs() < 1e-13);
}

#[test]
fn nig_density_direct_substitution() {
    // β^α √ν / (Γ(α) √(2πσ²)) σ^{-2(α+1)} exp(−(2β + ν(μ−λ)²)/(2σ²)) at (0,1,2,1), μ=0, σ²=1
    let expected = -0.5 * (2.0 * PI).ln() - 1.0;
    assert!((nig_log_density(0.0, 1.0, &p(0.0, 1.0, 2.0, 1.0)).unwrap() - expected).abs() < 1e-14);
}

#[test]
fn gaussian_limit() {
    let big = 1e6;
    let prm = p(3.0, big, big, big * 2.0);
    let var = prm.beta / prm.alpha;
    let mut worst_pdf: f64 = 0.0;
    for i in -60i32..=60 {
        let x = prm.lambda + i as f64 * 0.1;
        let gauss = -0.5 * (2.0 * PI * var).ln() - (x - prm.lambda).powi(2) / (2.0 * var);
        let st = student_t_log_pdf(x, &prm).unwrap();
        if i.abs() <= 30 {
            assert!((st - gauss).abs() < 1e-4, "x={x}");
        }
        worst_pdf = worst_pdf.max((st.exp() - gauss.exp()).abs());
    }
    assert!(worst_pdf < 1e-3);
}

#[test]
fn nll_is_negative_log_student_t() {
    let prm = p(0.7, 1.3, 2.2, 0.9);
    let offset = nll_loss(0.0, &prm).unwrap() + student_t_log_pdf(0.0, &prm).unwrap();
    for &x in &[-3.0, -0.5, 0.7, 2.0, 9.0] {
        let o = nll_loss(x, &prm).unwrap() + student_t_log_pdf(x, &prm).unwrap();
        assert!((o - offset).abs() < 1e-12);
        let h = 1e-6;
        let d_nll = (nll_loss(x, &p(0.7 + h, 1.3, 2.2, 0.9)).unwrap()
            - nll_loss(x, &p(0.7 - h, 1.3, 2.2, 0.9)).unwrap())
            / (2.0 * h);
        let d_lp = (student_t_log_pdf(x, &p(0.7 + h, 1.3, 2.2, 0.9)).unwrap()
            - student_t_log_pdf(x, &p(0.7 - h, 1.3, 2.2, 0.9)).unwrap())
            / (2.0 * h);
        assert!((d_nll + d_lp).abs() < 1e-7);
    }
}

#[test]
fn mad_constant_against_erf_inverse() {
    let c = std::f64::consts::SQRT_2 * statrs::function::erf::erf_inv(0.5);
    assert!((c - MAD_CONSTANT).abs() < 1e-15);
    assert_eq!(format!("{MAD_CONSTANT:.3}"), "0.674");
}

#[test]
fn regularizer_worked_example() {
    let prm = p(0.0, 1.0, 2.0, 1.0);
    let lr = ratio_regularizer(2.0, &prm).unwrap();
    assert!((lr - 5.8956).abs() < 5e-5, "{lr}");
    let lt = total_loss(2.0, &prm, 1.0).unwrap();
    assert!((lt - nll_loss(2.0, &prm).unwrap() - 5.8956).abs() < 5e-5);
    assert_eq!(total_loss(2.0, &prm, 0.0).unwrap(), nll_loss(2.0, &prm).unwrap());
}

/// Which scalar loss a gradient check targets.
#[derive(Clone, Copy, Debug)]
enum Loss {
    Nll,
    Ratio,
    Total(f64),
}

fn scalar(loss: Loss, x: f64, q: &[f64; 4]) -> f64 {
    let prm = NigParams {
        lambda: q[0],
        nu: q[1],
        alpha: q[2],
        beta: q[3],
    };
    match loss {
        Loss::Nll => nll_loss(x, &prm).unwrap(),
        Loss::Ratio => ratio_regularizer(x, &prm).unwrap(),
        Loss::Total(eps) => total_loss(x, &prm, eps).unwrap(),
    }
}

fn graph_grad(loss: Loss, x: f64, q: &[f64; 4]) -> (f64, [f64; 4]) {
    let mut g = Graph::new();
    let xo = g.constant(Tensor::scalar(x));
    let vars = NigVars {
        lambda: g.leaf(Tensor::scalar(q[0]), true),
        nu: g.leaf(Tensor::scalar(q[1]), true),
        alpha: g.leaf(Tensor::scalar(q[2]), true),
        beta: g.leaf(Tensor::scalar(q[3]), true),
    };
    let out = match loss {
        Loss::Nll => nll_loss_graph(&mut g, xo, vars).unwrap(),
        Loss::Ratio => ratio_regularizer_graph(&mut g, xo, vars, RegularizerMode::Plain).unwrap(),
        Loss::Total(eps) => total_loss_graph(&mut g, xo, vars, eps, RegularizerMode::Plain).unwrap(),
    };
    let grads = g.backward(out).unwrap();
    let d = |v| grads.get(v).unwrap().item().unwrap();
    (
        g.value(out).item().unwrap(),
        [d(vars.lambda), d(vars.nu), d(vars.alpha), d(vars.beta)],
    )
}

fn assert_fd(loss: Loss, x: f64, q: [f64; 4], tol: f64) {
    let (value, grad) = graph_grad(loss, x, &q);
    assert!((value - scalar(loss, x, &q)).abs() < 1e-10 * value.abs().max(1.0));
    let h = 1e-6;
    for k in 0..4 {
        let mut plus = q;
        let mut minus = q;
        plus[k] += h;
        minus[k] -= h;
        let fd = (scalar(loss, x, &plus) - scalar(loss, x, &minus)) / (2.0 * h);
        let rel = (grad[k] - fd).abs() / grad[k].abs().max(fd.abs()).max(1e-3);
        assert!(rel < tol, "{loss:?} x={x} q={q:?} param {k}: analytic {} fd {fd}", grad[k]);
    }
}

#[test]
fn nll_gradient_at_reference_point() {
    assert_fd(Loss::Nll, 0.0, [1.0, 2.0, 3.0, 4.0], 1e-6);
}

#[test]
fn loss_gradients_at_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let q = [
            rng.gen_range(-3.0..3.0),
            rng.gen_range(0.2..5.0),
            rng.gen_range(1.2..6.0),
            rng.gen_range(0.2..5.0),
        ];
        // Keep the residual away from the |·| kink.
        let mut x: f64 = rng.gen_range(-5.0..5.0);
        if (x - q[0]).abs() < 0.1 {
            x += 0.5;
        }
        let eps = rng.gen_range(0.0..1.0);
        assert_fd(Loss::Nll, x, q, 1e-5);
        assert_fd(Loss::Ratio, x, q, 1e-5);
        assert_fd(Loss::Total(eps), x, q, 1e-5);
    }
}

proptest! {
    #[test]
    fn decomposition_identity(nu in 1e-3f64..1e3, alpha in 1.0001f64..1e3, beta in 1e-3f64..1e3) {
        let d = decompose(&NigParams { lambda: 0.0, nu, alpha, beta }).unwrap();
        let rel = (d.data_var + d.knowledge_var - d.total_var).abs() / d.total_var;
        prop_assert!(rel <= 1e-12);
        prop_assert!(d.data_var >= 0.0 && d.knowledge_var >= 0.0);
    }

    #[test]
    fn regularizer_sign_tracks_error_ratio(res in 0.0f64..10.0, nu in 0.1f64..10.0, alpha in 1.1f64..10.0, beta in 0.1f64..10.0) {
        let prm = NigParams { lambda: 0.0, nu, alpha, beta };
        let est = MAD_CONSTANT * (beta / (alpha - 1.0)).sqrt();
        let lr = ratio_regularizer(res, &prm).unwrap();
        prop_assert_eq!(lr > 0.0, res > est);
    }
}
