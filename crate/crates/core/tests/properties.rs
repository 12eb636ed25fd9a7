use contraction_observer::loss::{self, LossSpec, PenaltyForm};
use contraction_observer::network::{Activation, Mlp, ParamVector};
use contraction_observer::sampling::sample_collocation;
use contraction_observer::{linalg, systems, BoxDomain};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn nalgebra_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let m = DMatrix::from_row_slice(n, n, a);
    let mut ev: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

fn symmetric(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, n * (n + 1) / 2).prop_map(move |upper| {
        let mut a = vec![0.0; n * n];
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                a[i * n + j] = upper[k];
                a[j * n + i] = upper[k];
                k += 1;
            }
        }
        a
    })
}

fn net_strategy() -> impl Strategy<Value = Mlp> {
    (prop::collection::vec(1usize..7, 1..4), any::<u64>()).prop_map(|(hidden, seed)| {
        let dims = contraction_observer::network::layer_dims_for(2, 1, &hidden);
        Mlp::init(&dims, Activation::Tanh, seed).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eigenvalues_match_reference(n in 1usize..7, seed in any::<u64>()) {
        let a = {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let v = rng.gen_range(-3.0..3.0);
                    a[i * n + j] = v;
                    a[j * n + i] = v;
                }
            }
            a
        };
        let ours = linalg::sym_eigenvalues(&a, n);
        let reference = nalgebra_eigenvalues(&a, n);
        for (x, y) in ours.iter().zip(&reference) {
            prop_assert!((x - y).abs() < 1e-9, "{ours:?} vs {reference:?}");
        }
        prop_assert!((linalg::sym_max_eigenvalue(&a, n) - reference[n - 1]).abs() < 1e-9);
    }

    #[test]
    fn closed_form_2x2_matches_reference(a in symmetric(2)) {
        let [lo, hi] = linalg::sym2_eigenvalues(a[0], a[1], a[3]);
        let reference = nalgebra_eigenvalues(&a, 2);
        prop_assert!((lo - reference[0]).abs() < 1e-10);
        prop_assert!((hi - reference[1]).abs() < 1e-10);
    }

    #[test]
    fn zero_minor_penalty_iff_negative_semidefinite(a in prop_oneof![symmetric(2), symmetric(3)]) {
        let n = if a.len() == 4 { 2 } else { 3 };
        let minors = loss::leading_minors(&a, n);
        prop_assume!(minors.iter().all(|d| d.abs() > 1e-6));
        let penalty: f64 = (1..=n).map(|i| loss::minor_penalty(&minors, i).unwrap()).sum();
        let max_eig = nalgebra_eigenvalues(&a, n)[n - 1];
        prop_assert_eq!(penalty == 0.0, max_eig <= 0.0, "minors {:?}, max eig {}", minors, max_eig);
    }

    #[test]
    fn pack_unpack_is_identity(net in net_strategy(), scale in 0.1..3.0f64) {
        let theta: Vec<f64> = net.pack().0.iter().map(|v| v * scale + 0.25).collect();
        let other = net.unpack(&ParamVector(theta.clone())).unwrap();
        prop_assert_eq!(other.pack().0, theta);
        prop_assert_eq!(other.unpack(&net.pack()).unwrap(), net);
    }

    #[test]
    fn mpdi_loss_ignores_point_order(net in net_strategy(), seed in any::<u64>(), shift in 1usize..40) {
        let system = systems::vanderpol();
        let batch = sample_collocation(&system, 40, seed).unwrap();
        let order: Vec<usize> = (0..40).map(|j| (j + shift) % 40).rev().collect();
        let permuted = batch.select(&order);
        let spec = LossSpec::vanderpol(2.5);
        let a = loss::mpdi_loss(&system, &net, &batch, &spec).unwrap();
        let b = loss::mpdi_loss(&system, &net, &permuted, &spec).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn duplicated_points_leave_means_unchanged(net in net_strategy(), seed in any::<u64>()) {
        let system = systems::reverse_duffing();
        let batch = sample_collocation(&system, 25, seed).unwrap();
        let twice: Vec<usize> = (0..25).chain(0..25).collect();
        let doubled = batch.select(&twice);
        let spec = LossSpec::reverse_duffing(2.5);
        let a = loss::total_loss(&system, &net, &batch, &spec).unwrap();
        let b = loss::total_loss(&system, &net, &doubled, &spec).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn hinge_loss_scales_with_rho(net in net_strategy(), c in 0.0..10.0f64) {
        let system = systems::vanderpol();
        let batch = sample_collocation(&system, 20, 5).unwrap();
        let spec = LossSpec::vanderpol(2.5);
        let scaled = LossSpec { rho: spec.rho.iter().map(|r| c * r).collect(), ..spec.clone() };
        let a = loss::mpdi_loss(&system, &net, &batch, &spec).unwrap();
        let b = loss::mpdi_loss(&system, &net, &batch, &scaled).unwrap();
        prop_assert!((c * a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }

    #[test]
    fn total_is_weighted_sum(net in net_strategy(), mu1 in 0.0..5.0f64, mu2 in 0.0..5.0f64, squared in any::<bool>()) {
        let system = systems::vanderpol();
        let batch = sample_collocation(&system, 20, 9).unwrap();
        let spec = LossSpec {
            mu1,
            mu2,
            penalty_form: if squared { PenaltyForm::SquaredHinge } else { PenaltyForm::Hinge },
            ..LossSpec::vanderpol(2.5)
        };
        let total = loss::total_loss(&system, &net, &batch, &spec).unwrap();
        let parts = mu1 * loss::mpdi_loss(&system, &net, &batch, &spec).unwrap()
            + mu2 * loss::bc_loss(&system, &net, &batch).unwrap();
        prop_assert!((total - parts).abs() <= 1e-12 * total.abs().max(1.0));
    }

    #[test]
    fn lipschitz_bound_dominates_sampled_ratios(net in net_strategy(), x in prop::array::uniform2(-2.0..2.0f64), y1 in -2.0..2.0f64, y2 in -2.0..2.0f64) {
        prop_assume!((y1 - y2).abs() > 1e-6);
        let a = net.forward(&[x[0], x[1], y1]).unwrap();
        let b = net.forward(&[x[0], x[1], y2]).unwrap();
        let ratio = linalg::norm(&[a[0] - b[0], a[1] - b[1]]) / (y1 - y2).abs();
        prop_assert!(ratio <= net.lipschitz_bound() * (1.0 + 1e-6));
    }

    #[test]
    fn grid_points_stay_in_box(lo in prop::array::uniform3(-5.0..0.0f64), width in prop::array::uniform3(0.0..4.0f64), per_axis in 2usize..6) {
        let hi: Vec<f64> = lo.iter().zip(&width).map(|(l, w)| l + w).collect();
        let domain = BoxDomain::new(lo.to_vec(), hi).unwrap();
        let mut out = [0.0; 3];
        for k in 0..per_axis.pow(3) {
            domain.grid_point(per_axis, k, &mut out);
            prop_assert!(domain.contains(&out));
        }
    }
}

#[test]
fn sampling_covers_the_box_uniformly() {
    let system = systems::vanderpol();
    let set = sample_collocation(&system, 100_000, 11).unwrap();
    let mut sums = [0.0; 3];
    let mut mins = [f64::INFINITY; 3];
    let mut maxs = [f64::NEG_INFINITY; 3];
    for (x, y) in set.iter() {
        for (k, v) in x.iter().chain(y).enumerate() {
            sums[k] += v;
            mins[k] = mins[k].min(*v);
            maxs[k] = maxs[k].max(*v);
        }
    }
    let (lo, hi) = ([-2.0, -3.0, -2.0], [2.0, 3.0, 2.0]);
    for k in 0..3 {
        assert!(mins[k] >= lo[k] && maxs[k] <= hi[k]);
        // within 1% of the width of each face
        assert!(mins[k] - lo[k] < 0.01 * (hi[k] - lo[k]));
        assert!(hi[k] - maxs[k] < 0.01 * (hi[k] - lo[k]));
        // the mean of 1e5 uniforms sits within 5 standard errors of the centre
        let se = (hi[k] - lo[k]) / 12f64.sqrt() / (100_000f64).sqrt();
        assert!((sums[k] / 1e5).abs() < 5.0 * se, "axis {k} mean {}", sums[k] / 1e5);
    }
}

#[test]
fn same_seed_same_collocation() {
    let system = systems::reverse_duffing();
    let a = sample_collocation(&system, 100, 3).unwrap();
    let b = sample_collocation(&system, 100, 3).unwrap();
    let c = sample_collocation(&system, 100, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
