//! Hand-derived values for a linear plant with an affine gain, where `D`
//! is constant and every loss term has a closed form.

use contraction_observer::loss::{self, LossSpec, PenaltyForm};
use contraction_observer::network::{Activation, Mlp};
use contraction_observer::sampling::CollocationSet;
use contraction_observer::verify;
use contraction_observer::{systems, BoxDomain, SystemModel};

fn plant() -> SystemModel {
    // A = [[0, 1], [-2, -3]], y = x1
    systems::linear(
        "affine",
        vec![0.0, 1.0, -2.0, -3.0],
        vec![1.0, 0.0],
        BoxDomain::symmetric(&[1.0, 1.0]).unwrap(),
        BoxDomain::symmetric(&[1.0]).unwrap(),
    )
    .unwrap()
}

/// k(x_hat, y) = W [x_hat; y] + b with W = [[-4, 0.5, 1], [0.3, -2, 0]].
fn gain() -> Mlp {
    Mlp::from_parts(
        &[3, 2],
        vec![vec![-4.0, 0.5, 1.0, 0.3, -2.0, 0.0]],
        vec![vec![0.1, -0.2]],
        Activation::Identity,
    )
    .unwrap()
}

fn three_points(system: &SystemModel) -> CollocationSet {
    CollocationSet::from_points(
        system.domain_x().clone(),
        system.domain_y().clone(),
        &[
            (vec![0.5, -0.5], vec![0.2]),
            (vec![-1.0, 1.0], vec![-1.0]),
            (vec![0.0, 0.25], vec![0.75]),
        ],
        0,
    )
    .unwrap()
}

// A + W_x = [[-4, 1.5], [-1.7, -5]], He = [[-4, -0.1], [-0.1, -5]].
// lambda = 2.25: D = [[0.5, -0.1], [-0.1, -0.5]], minors 0.5 and -0.26.
// Boundary residuals k(x, x1): |k|^2 = 3.625, 19.21, 0.540625.
const BC_MEAN: f64 = 23.375625 / 3.0;

fn spec(form: PenaltyForm) -> LossSpec {
    LossSpec {
        lambda: 2.25,
        mu1: 2.0,
        mu2: 0.5,
        rho: vec![1.0, 0.5],
        penalty_form: form,
    }
}

#[test]
fn contraction_matrix_is_constant_and_known() {
    let system = plant();
    let d = loss::contraction_matrix(&system, &gain(), &[0.3, -0.7], &[0.1], 2.25).unwrap();
    let expected = [0.5, -0.1, -0.1, -0.5];
    for (a, b) in d.d.iter().zip(expected) {
        assert!((a - b).abs() < 1e-14, "{:?}", d.d);
    }
    let m = d.leading_minors();
    assert!((m[0] - 0.5).abs() < 1e-14 && (m[1] + 0.26).abs() < 1e-14);
    assert!((d.max_eigenvalue() - 0.26f64.sqrt()).abs() < 1e-14);
}

#[test]
fn hinge_total_matches_hand_assembly() {
    let system = plant();
    let batch = three_points(&system);
    let s = spec(PenaltyForm::Hinge);
    let mpdi = 0.5 + 0.5 * 0.26;
    assert!((loss::mpdi_loss(&system, &gain(), &batch, &s).unwrap() - mpdi).abs() < 1e-13);
    assert!((loss::bc_loss(&system, &gain(), &batch).unwrap() - BC_MEAN).abs() < 1e-13);
    let total = loss::total_loss(&system, &gain(), &batch, &s).unwrap();
    assert!((total - (2.0 * mpdi + 0.5 * BC_MEAN)).abs() < 1e-12, "{total}");
}

#[test]
fn squared_hinge_total_matches_hand_assembly() {
    let system = plant();
    let batch = three_points(&system);
    let mpdi = 0.25 + 0.5 * 0.26 * 0.26;
    let total = loss::total_loss(&system, &gain(), &batch, &spec(PenaltyForm::SquaredHinge)).unwrap();
    assert!((total - (2.0 * mpdi + 0.5 * BC_MEAN)).abs() < 1e-12, "{total}");
}

#[test]
fn satisfied_certificate_has_no_mpdi_penalty() {
    // lambda = 1: D = [[-2, -0.1], [-0.1, -3]]
    let system = plant();
    let batch = three_points(&system);
    let s = LossSpec { lambda: 1.0, ..spec(PenaltyForm::Hinge) };
    assert_eq!(loss::mpdi_loss(&system, &gain(), &batch, &s).unwrap(), 0.0);
    let report = verify::check_mpdi_grid(&system, &gain(), 1.0, 5, 0.0).unwrap();
    assert_eq!(report.pass_rate, 1.0);
    assert!((report.worst_eigenvalue - (-2.5 + 0.26f64.sqrt())).abs() < 1e-12);
}

#[test]
fn violated_certificate_fails_every_grid_point() {
    let system = plant();
    let report = verify::check_mpdi_grid(&system, &gain(), 2.25, 4, 1e-2).unwrap();
    assert_eq!(report.points, 64);
    assert_eq!(report.pass_rate, 0.0);
    assert!((report.worst_eigenvalue - 0.26f64.sqrt()).abs() < 1e-12);
    assert_eq!(report.minor_disagreements, 0);
}

#[test]
fn boundary_grid_matches_direct_evaluation() {
    // on the boundary manifold k(x) = [-3 x1 + 0.5 x2 + 0.1, 0.3 x1 - 2 x2 - 0.2]
    let system = plant();
    let corners = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)];
    let norms: Vec<f64> = corners
        .iter()
        .map(|&(a, b): &(f64, f64)| {
            let k1 = -3.0 * a + 0.5 * b + 0.1;
            let k2 = 0.3 * a - 2.0 * b - 0.2;
            (k1 * k1 + k2 * k2).sqrt()
        })
        .collect();
    let (max, mean) = verify::check_bc_grid(&system, &gain(), 2).unwrap();
    assert!((max - norms.iter().cloned().fold(0.0, f64::max)).abs() < 1e-13);
    assert!((mean - norms.iter().sum::<f64>() / 4.0).abs() < 1e-13);
}

#[test]
fn eps_bar_grows_with_each_input() {
    let base = verify::estimate_eps_bar(0.1, 0.5, 4.0);
    assert!(verify::estimate_eps_bar(0.2, 0.5, 4.0) > base);
    assert!(verify::estimate_eps_bar(0.1, 0.6, 4.0) > base);
    assert!(verify::estimate_eps_bar(0.1, 0.5, 5.0) > base);
    // a satisfied certificate leaves only the boundary residual
    assert_eq!(verify::estimate_eps_bar(0.1, -3.0, 4.0), 0.1);
}

#[test]
fn eps_bar_tracks_perturbed_gain() {
    // adding a constant offset to the gain raises the boundary residual and
    // so the estimate, never lowers it
    let system = plant();
    let net = gain();
    let before = verify::verify(&system, &net, 2.25, 6, 1e-2).unwrap();
    let mut theta = net.pack();
    let len = theta.0.len();
    theta.0[len - 2] += 0.5;
    let shifted = net.unpack(&theta).unwrap();
    let after = verify::verify(&system, &shifted, 2.25, 6, 1e-2).unwrap();
    assert_eq!(after.mpdi.worst_eigenvalue, before.mpdi.worst_eigenvalue);
    assert!(after.eps_bar_estimate >= before.eps_bar_estimate);
}
