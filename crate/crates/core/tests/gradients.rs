use contraction_observer::loss::{self, LossSpec, PenaltyForm};
use contraction_observer::network::{loss_gradient, Activation, Mlp, ParamVector};
use contraction_observer::sampling::sample_collocation;
use contraction_observer::systems::{self, BoxDomain};

fn fd_gradient(
    system: &contraction_observer::SystemModel,
    net: &Mlp,
    batch: &contraction_observer::CollocationSet,
    spec: &LossSpec,
    step: f64,
) -> Vec<f64> {
    let theta = net.pack().0;
    (0..theta.len())
        .map(|k| {
            let mut p = theta.clone();
            p[k] = theta[k] + step;
            let fp = loss::total_loss(system, &net.unpack(&ParamVector(p.clone())).unwrap(), batch, spec).unwrap();
            p[k] = theta[k] - step;
            let fm = loss::total_loss(system, &net.unpack(&ParamVector(p)).unwrap(), batch, spec).unwrap();
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn gradient_matches_finite_differences_on_vanderpol() {
    let system = systems::vanderpol();
    let net = Mlp::init(&[3, 8, 2], Activation::Tanh, 21).unwrap();
    let batch = sample_collocation(&system, 10, 4).unwrap();
    let spec = LossSpec::vanderpol(2.5);
    let g = loss_gradient(&net, &batch, &spec, &system).unwrap();
    let fd = fd_gradient(&system, &net, &batch, &spec, 1e-5);
    let err = max_rel_error(&g.0, &fd);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn gradient_matches_with_squared_hinge_and_deep_net() {
    let system = systems::reverse_duffing();
    let net = Mlp::init(&[3, 6, 5, 4, 2], Activation::Tanh, 8).unwrap();
    let batch = sample_collocation(&system, 10, 2).unwrap();
    let spec = LossSpec {
        penalty_form: PenaltyForm::SquaredHinge,
        ..LossSpec::reverse_duffing(2.5)
    };
    let g = loss_gradient(&net, &batch, &spec, &system).unwrap();
    let fd = fd_gradient(&system, &net, &batch, &spec, 1e-5);
    let err = max_rel_error(&g.0, &fd);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn flat_region_has_zero_gradient() {
    // f = 0, zero net, negative rate: D = 2 lambda I is negative definite so
    // every hinge is inactive, and the zero net has zero boundary residual
    let system = systems::linear(
        "zero",
        vec![0.0; 4],
        vec![1.0, 0.0],
        BoxDomain::symmetric(&[1.0, 1.0]).unwrap(),
        BoxDomain::symmetric(&[1.0]).unwrap(),
    )
    .unwrap();
    let net = Mlp::zeros(&[3, 6, 2], Activation::Tanh).unwrap();
    let batch = sample_collocation(&system, 10, 1).unwrap();
    let spec = LossSpec {
        lambda: -1.0,
        mu1: 1.0,
        mu2: 1.0,
        rho: vec![1.0, 1.0],
        penalty_form: PenaltyForm::Hinge,
    };
    let g = loss_gradient(&net, &batch, &spec, &system).unwrap();
    assert!(g.0.iter().all(|&v| v == 0.0));
}

#[test]
fn gradient_is_linear_in_boundary_weight() {
    let system = systems::vanderpol();
    let net = Mlp::init(&[3, 8, 2], Activation::Tanh, 2).unwrap();
    let batch = sample_collocation(&system, 10, 4).unwrap();
    let one = LossSpec {
        mu1: 0.0,
        mu2: 1.0,
        ..LossSpec::vanderpol(2.5)
    };
    let two = LossSpec { mu2: 2.0, ..one.clone() };
    let g1 = loss_gradient(&net, &batch, &one, &system).unwrap();
    let g2 = loss_gradient(&net, &batch, &two, &system).unwrap();
    for (a, b) in g1.0.iter().zip(&g2.0) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn input_jacobian_matches_finite_differences() {
    let net = Mlp::init(&[3, 10, 10, 2], Activation::Tanh, 31).unwrap();
    let x = [0.4, -1.1, 0.7];
    let j = net.input_jacobian(&x).unwrap();
    let h = 1e-5;
    for c in 0..3 {
        let mut xp = x;
        let mut xm = x;
        xp[c] += h;
        xm[c] -= h;
        let fp = net.forward(&xp).unwrap();
        let fm = net.forward(&xm).unwrap();
        for r in 0..2 {
            let fd = (fp[r] - fm[r]) / (2.0 * h);
            let rel = (fd - j[r * 3 + c]).abs() / fd.abs().max(1e-3);
            assert!(rel < 1e-6, "({r},{c}): {fd} vs {}", j[r * 3 + c]);
        }
    }
}
