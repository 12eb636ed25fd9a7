//! Grid certification of a trained gain.
//!
//! The contraction matrix is checked by its largest eigenvalue (the ground
//! truth for semidefiniteness); leading minors are only cross-checked.
//! This is grid evidence, not a proof over the continuum.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::loss::leading_minors;
use crate::network::{Mlp, Tape};
use crate::systems::SystemModel;

const CHUNK: usize = 1024;

/// Result of the eigenvalue check of `D` over the `x_hat x y` grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpdiGridReport {
    pub grid_per_axis: usize,
    pub grid_shape: Vec<usize>,
    pub points: usize,
    pub passed: usize,
    pub non_finite_points: usize,
    /// `passed / points`; non-finite points count as failures.
    pub pass_rate: f64,
    pub worst_point: Vec<f64>,
    pub worst_eigenvalue: f64,
    /// Points with every `|Delta_i| > 1e-9` where the eigenvalue verdict and
    /// the strict minor sign pattern disagree. Zero when the loss surrogate
    /// is consistent with the certificate.
    pub minor_disagreements: usize,
    pub tolerance: f64,
    pub lambda: f64,
}

#[derive(Default)]
struct GridPartial {
    passed: usize,
    non_finite: usize,
    disagreements: usize,
    worst: Option<(f64, usize)>,
}

pub fn check_mpdi_grid(
    system: &SystemModel,
    net: &Mlp,
    lambda: f64,
    grid_per_axis: usize,
    tol: f64,
) -> Result<MpdiGridReport> {
    if grid_per_axis < 2 {
        return Err(Error::Precondition("grid_per_axis must be at least 2".into()));
    }
    let (n, p) = (system.n(), system.p());
    if net.input_dim() != n + p || net.output_dim() != n {
        return Err(Error::shape("network input", n + p, net.input_dim()));
    }
    let dims = n + p;
    let points = grid_per_axis
        .checked_pow(dims as u32)
        .ok_or_else(|| Error::Config("verification grid is too large".into()))?;
    let lo: Vec<f64> = system.domain_x().lo.iter().chain(&system.domain_y().lo).copied().collect();
    let hi: Vec<f64> = system.domain_x().hi.iter().chain(&system.domain_y().hi).copied().collect();
    let joint = crate::systems::BoxDomain { lo, hi };

    let starts: Vec<usize> = (0..points).step_by(CHUNK).collect();
    let partials: Vec<GridPartial> = starts
        .par_iter()
        .map(|&start| {
            let mut part = GridPartial::default();
            let mut tape = Tape::new(net, n);
            let mut input = vec![0.0; dims];
            let mut jf = vec![0.0; n * n];
            let mut d = vec![0.0; n * n];
            for k in start..(start + CHUNK).min(points) {
                joint.grid_point(grid_per_axis, k, &mut input);
                tape.record(net, &input);
                system.jac_into(&input[..n], &mut jf);
                let jk = tape.jacobian();
                for i in 0..n {
                    for j in 0..n {
                        let m_ij = jf[i * n + j] + jk[i * n + j];
                        let m_ji = jf[j * n + i] + jk[j * n + i];
                        d[i * n + j] = 0.5 * (m_ij + m_ji) + if i == j { 2.0 * lambda } else { 0.0 };
                    }
                }
                if d.iter().any(|v| !v.is_finite()) {
                    part.non_finite += 1;
                    continue;
                }
                let eig = linalg::sym_max_eigenvalue(&d, n);
                if eig <= tol {
                    part.passed += 1;
                }
                if part.worst.map_or(true, |(w, _)| eig > w) {
                    part.worst = Some((eig, k));
                }
                let minors = leading_minors(&d, n);
                if minors.iter().all(|m| m.abs() > 1e-9) {
                    let pattern = minors
                        .iter()
                        .enumerate()
                        .all(|(i, m)| if (i + 1) % 2 == 1 { *m < 0.0 } else { *m > 0.0 });
                    if pattern != (eig <= 0.0) {
                        part.disagreements += 1;
                    }
                }
            }
            part
        })
        .collect();

    let mut passed = 0;
    let mut non_finite = 0;
    let mut disagreements = 0;
    let mut worst: Option<(f64, usize)> = None;
    for part in partials {
        passed += part.passed;
        non_finite += part.non_finite;
        disagreements += part.disagreements;
        if let Some((e, k)) = part.worst {
            if worst.map_or(true, |(w, _)| e > w) {
                worst = Some((e, k));
            }
        }
    }
    let (worst_eigenvalue, worst_point) = match worst {
        Some((e, k)) => {
            let mut pt = vec![0.0; dims];
            joint.grid_point(grid_per_axis, k, &mut pt);
            (e, pt)
        }
        None => (f64::NAN, Vec::new()),
    };
    Ok(MpdiGridReport {
        grid_per_axis,
        grid_shape: vec![grid_per_axis; dims],
        points,
        passed,
        non_finite_points: non_finite,
        pass_rate: passed as f64 / points as f64,
        worst_point,
        worst_eigenvalue,
        minor_disagreements: disagreements,
        tolerance: tol,
        lambda,
    })
}

/// `(max, mean)` of `|k(x, h(x))|` over a uniform grid of the state box.
pub fn check_bc_grid(system: &SystemModel, net: &Mlp, grid_per_axis: usize) -> Result<(f64, f64)> {
    if grid_per_axis < 2 {
        return Err(Error::Precondition("grid_per_axis must be at least 2".into()));
    }
    let (n, p) = (system.n(), system.p());
    if net.input_dim() != n + p || net.output_dim() != n {
        return Err(Error::shape("network input", n + p, net.input_dim()));
    }
    let points = grid_per_axis
        .checked_pow(n as u32)
        .ok_or_else(|| Error::Config("verification grid is too large".into()))?;
    let starts: Vec<usize> = (0..points).step_by(CHUNK).collect();
    let partials: Vec<(f64, f64)> = starts
        .par_iter()
        .map(|&start| {
            let mut input = vec![0.0; n + p];
            let mut out = vec![0.0; n];
            let (mut max, mut sum) = (0.0_f64, 0.0);
            for k in start..(start + CHUNK).min(points) {
                system.domain_x().grid_point(grid_per_axis, k, &mut input[..n]);
                let (x, y) = input.split_at_mut(n);
                system.h_into(x, y);
                net.forward_into(&input, &mut out);
                let r = linalg::norm(&out);
                max = max.max(r);
                sum += r;
            }
            (max, sum)
        })
        .collect();
    let (max, sum) = partials
        .into_iter()
        .fold((0.0_f64, 0.0), |(m, s), (pm, ps)| (m.max(pm), s + ps));
    Ok((max, sum / points as f64))
}

/// Heuristic stand-in for the gain approximation error bound:
/// `bc_residual_max + max(0, worst_eigenvalue) * domain_diameter`.
///
/// The exact gain is unknown, so this is an estimate used only to evaluate
/// the error envelope, never a certified bound.
pub fn estimate_eps_bar(bc_residual_max: f64, worst_eigenvalue: f64, domain_diameter: f64) -> f64 {
    const GAP_WEIGHT: f64 = 1.0;
    bc_residual_max + GAP_WEIGHT * worst_eigenvalue.max(0.0) * domain_diameter
}

/// Full post-training certificate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub system: String,
    pub mpdi: MpdiGridReport,
    pub bc_residual_max: f64,
    pub bc_residual_mean: f64,
    /// Heuristic estimate, see [`estimate_eps_bar`].
    pub eps_bar_estimate: f64,
    pub lipschitz_bound_l: f64,
    pub lambda: f64,
    pub tolerance: f64,
}

impl VerificationReport {
    pub fn pass_rate(&self) -> f64 {
        self.mpdi.pass_rate
    }

    /// TOML text, with `preamble` lines emitted first as comments.
    pub fn to_toml(&self, preamble: &str) -> String {
        let mut s = String::new();
        for line in preamble.lines() {
            let _ = writeln!(s, "# {line}");
        }
        s.push_str("# eps_bar_estimate is a heuristic (boundary residual plus eigenvalue gap times domain diameter)\n");
        s.push_str(&toml::to_string(self).expect("report serializes"));
        s
    }
}

pub fn verify(system: &SystemModel, net: &Mlp, lambda: f64, grid_per_axis: usize, tol: f64) -> Result<VerificationReport> {
    let mpdi = check_mpdi_grid(system, net, lambda, grid_per_axis, tol)?;
    let (bc_max, bc_mean) = check_bc_grid(system, net, grid_per_axis)?;
    let eps_bar = estimate_eps_bar(bc_max, mpdi.worst_eigenvalue, system.domain_x().diameter());
    Ok(VerificationReport {
        system: system.name().to_string(),
        mpdi,
        bc_residual_max: bc_max,
        bc_residual_mean: bc_mean,
        eps_bar_estimate: eps_bar,
        lipschitz_bound_l: net.lipschitz_bound(),
        lambda,
        tolerance: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Activation;
    use crate::systems::{self, BoxDomain};

    fn zero_field() -> SystemModel {
        systems::linear(
            "zero",
            vec![0.0; 4],
            vec![1.0, 0.0],
            BoxDomain::symmetric(&[1.0, 1.0]).unwrap(),
            BoxDomain::symmetric(&[1.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_net_zero_field_fails_everywhere() {
        let net = Mlp::zeros(&[3, 4, 2], Activation::Tanh).unwrap();
        let r = check_mpdi_grid(&zero_field(), &net, 1.0, 5, 1e-2).unwrap();
        assert_eq!(r.pass_rate, 0.0);
        assert_eq!(r.worst_eigenvalue, 2.0);
        assert_eq!(r.points, 125);
    }

    #[test]
    fn constructed_linear_gain_certifies() {
        // A = [[0, 1], [-2, 0.5]], lambda = 1; gain k = K x_hat with
        // K = -(He{A} + 2 lambda I + I) has He{A + K} + 2 lambda I = -I
        let a = vec![0.0, 1.0, -2.0, 0.5];
        let lambda = 1.0;
        let he_a = [0.0, -0.5, -0.5, 0.5];
        let mut k = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..2 {
                let diag = if i == j { 2.0 * lambda + 1.0 } else { 0.0 };
                k[i * 3 + j] = -(he_a[i * 2 + j] + diag);
            }
        }
        // K is symmetric, so He{A + K} = He{A} + K
        let sys = systems::linear(
            "lin",
            a,
            vec![1.0, 0.0],
            BoxDomain::symmetric(&[1.0, 1.0]).unwrap(),
            BoxDomain::symmetric(&[1.0]).unwrap(),
        )
        .unwrap();
        let net = Mlp::from_parts(&[3, 2], vec![k], vec![vec![0.0; 2]], Activation::Tanh).unwrap();
        let r = check_mpdi_grid(&sys, &net, lambda, 4, 1e-2).unwrap();
        assert_eq!(r.pass_rate, 1.0);
        assert!((r.worst_eigenvalue + 1.0).abs() < 1e-12);
        assert_eq!(r.minor_disagreements, 0);
    }

    #[test]
    fn bc_residuals() {
        let s = systems::vanderpol();
        let zero = Mlp::zeros(&[3, 4, 2], Activation::Tanh).unwrap();
        assert_eq!(check_bc_grid(&s, &zero, 5).unwrap(), (0.0, 0.0));
        let c = Mlp::from_parts(&[3, 2], vec![vec![0.0; 6]], vec![vec![3.0, 4.0]], Activation::Tanh).unwrap();
        assert_eq!(check_bc_grid(&s, &c, 5).unwrap(), (5.0, 5.0));
    }

    #[test]
    fn eps_bar_of_perfect_certificate_is_zero() {
        assert_eq!(estimate_eps_bar(0.0, -0.3, 4.0), 0.0);
        assert_eq!(estimate_eps_bar(0.5, 2.0, 3.0), 6.5);
    }

    #[test]
    fn grid_check_is_deterministic() {
        let s = systems::vanderpol();
        let net = Mlp::init(&[3, 6, 2], Activation::Tanh, 4).unwrap();
        let a = check_mpdi_grid(&s, &net, 2.5, 7, 1e-2).unwrap();
        let b = check_mpdi_grid(&s, &net, 2.5, 7, 1e-2).unwrap();
        assert_eq!(a, b);
    }
}
