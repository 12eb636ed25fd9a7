//! Physics loss for the observer gain.
//!
//! At each collocation pair the symmetric matrix
//! `D = He{J_f(x_hat) + d k/d x_hat (x_hat, y)} + 2 lambda I` must be
//! negative semidefinite. The trainable surrogate penalizes the leading
//! principal minors whose sign breaks the pattern `(-1)^i Delta_i >= 0`.
//! A second term drives the gain to zero on the output manifold
//! `y = h(x_hat)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::network::{Mlp, Tape};
use crate::sampling::CollocationSet;
use crate::systems::SystemModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyForm {
    #[default]
    Hinge,
    SquaredHinge,
}

impl PenaltyForm {
    pub fn tag(self) -> &'static str {
        match self {
            PenaltyForm::Hinge => "hinge",
            PenaltyForm::SquaredHinge => "squared-hinge",
        }
    }
}

/// Contraction rate and loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub lambda: f64,
    pub mu1: f64,
    pub mu2: f64,
    /// One weight per leading minor.
    pub rho: Vec<f64>,
    #[serde(default)]
    pub penalty_form: PenaltyForm,
}

impl LossSpec {
    pub fn new(lambda: f64, mu1: f64, mu2: f64, rho: Vec<f64>) -> Result<Self> {
        let spec = LossSpec {
            lambda,
            mu1,
            mu2,
            rho,
            penalty_form: PenaltyForm::Hinge,
        };
        spec.validate(spec.rho.len())?;
        Ok(spec)
    }

    /// Van der Pol weights: `mu1 = 1e-3`, `mu2 = 1`, `rho = [1, 0.1]`.
    pub fn vanderpol(lambda: f64) -> Self {
        LossSpec {
            lambda,
            mu1: 1e-3,
            mu2: 1.0,
            rho: vec![1.0, 0.1],
            penalty_form: PenaltyForm::Hinge,
        }
    }

    /// Reverse Duffing weights: all ones.
    pub fn reverse_duffing(lambda: f64) -> Self {
        LossSpec {
            lambda,
            mu1: 1.0,
            mu2: 1.0,
            rho: vec![1.0, 1.0],
            penalty_form: PenaltyForm::Hinge,
        }
    }

    /// Checks the spec against state dimension `n`. Returns warnings for
    /// settings that are legal but void the noise-robustness bound
    /// (`lambda <= 2`).
    pub fn validate(&self, n: usize) -> Result<Vec<String>> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        self.check_consistent(n)?;
        let mut warnings = Vec::new();
        if self.lambda <= 2.0 {
            warnings.push(format!(
                "lambda = {} does not exceed 2: the input-to-state error bound requires lambda > 2",
                self.lambda
            ));
        }
        Ok(warnings)
    }

    /// Shape and sign checks shared by evaluation (which, unlike
    /// [`LossSpec::validate`], accepts any finite lambda).
    fn check_consistent(&self, n: usize) -> Result<()> {
        if self.rho.len() != n {
            return Err(Error::Config(format!(
                "rho has {} entries but the state dimension is {n}",
                self.rho.len()
            )));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite".into()));
        }
        for (name, v) in [("mu1", self.mu1), ("mu2", self.mu2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.rho.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("rho entries must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// `D(x_hat, y)`, row-major `n x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionMatrix {
    pub n: usize,
    pub d: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub y: Vec<f64>,
}

impl ContractionMatrix {
    pub fn max_eigenvalue(&self) -> f64 {
        linalg::sym_max_eigenvalue(&self.d, self.n)
    }

    pub fn leading_minors(&self) -> Vec<f64> {
        leading_minors(&self.d, self.n)
    }
}

fn check_point_dims(system: &SystemModel, net: &Mlp, x_hat: &[f64], y: &[f64]) -> Result<()> {
    let (n, p) = (system.n(), system.p());
    if x_hat.len() != n {
        return Err(Error::shape("x_hat", n, x_hat.len()));
    }
    if y.len() != p {
        return Err(Error::shape("y", p, y.len()));
    }
    if net.input_dim() != n + p {
        return Err(Error::shape("network input", n + p, net.input_dim()));
    }
    if net.output_dim() != n {
        return Err(Error::shape("network output", n, net.output_dim()));
    }
    Ok(())
}

/// Assembles `D = He{J_f + J_k} + 2 lambda I` from its two Jacobians.
fn assemble(jf: &[f64], jk: &[f64], n: usize, lambda: f64, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let m_ij = jf[i * n + j] + jk[i * n + j];
            let m_ji = jf[j * n + i] + jk[j * n + i];
            out[i * n + j] = 0.5 * (m_ij + m_ji) + if i == j { 2.0 * lambda } else { 0.0 };
        }
    }
}

pub fn contraction_matrix(
    system: &SystemModel,
    net: &Mlp,
    x_hat: &[f64],
    y: &[f64],
    lambda: f64,
) -> Result<ContractionMatrix> {
    check_point_dims(system, net, x_hat, y)?;
    let n = system.n();
    let input = [x_hat, y].concat();
    let jk_full = net.input_jacobian(&input)?;
    let in_dim = net.input_dim();
    let jk: Vec<f64> = (0..n)
        .flat_map(|i| jk_full[i * in_dim..i * in_dim + n].iter().copied())
        .collect();
    let jf = system.jac_f(x_hat);
    let mut d = vec![0.0; n * n];
    assemble(&jf, &jk, n, lambda, &mut d);
    Ok(ContractionMatrix {
        n,
        d,
        x_hat: x_hat.to_vec(),
        y: y.to_vec(),
    })
}

/// `Delta_i = det` of the top-left `i x i` block, `i = 1..=n`.
pub fn leading_minors(d: &[f64], n: usize) -> Vec<f64> {
    (1..=n)
        .map(|k| linalg::determinant(&linalg::leading_block(d, n, k), k))
        .collect()
}

/// Sign the `i`-th (1-based) minor must have for negative semidefiniteness.
#[inline]
fn required_sign(i: usize) -> f64 {
    if i % 2 == 1 {
        -1.0
    } else {
        1.0
    }
}

/// Hinge penalty of the `i`-th (1-based) leading minor: `max(0, Delta_i)`
/// for odd `i`, `max(0, -Delta_i)` for even `i`.
pub fn minor_penalty(minors: &[f64], i: usize) -> Result<f64> {
    if i == 0 || i > minors.len() {
        return Err(Error::Precondition(format!(
            "minor index {i} outside 1..={}",
            minors.len()
        )));
    }
    Ok((-required_sign(i) * minors[i - 1]).max(0.0))
}

/// Weighted penalty of one contraction matrix and its derivative with
/// respect to each minor.
fn penalty_and_slopes(minors: &[f64], spec: &LossSpec, slopes: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (k, (&delta, &rho)) in minors.iter().zip(&spec.rho).enumerate() {
        let sign = -required_sign(k + 1);
        let violation = (sign * delta).max(0.0);
        let (value, slope) = match spec.penalty_form {
            PenaltyForm::Hinge => (violation, if violation > 0.0 { sign } else { 0.0 }),
            PenaltyForm::SquaredHinge => (violation * violation, 2.0 * violation * sign),
        };
        total += rho * value;
        slopes[k] = rho * slope;
    }
    total
}

/// Loss value (and optionally gradient) over a batch.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub total: f64,
    pub mpdi: f64,
    pub bc: f64,
    /// Packed-parameter gradient of `total`, when requested.
    pub gradient: Option<Vec<f64>>,
}

/// Points per reduction chunk. Fixed, so partial sums are combined in the
/// same order whatever the thread count.
const CHUNK: usize = 128;

struct Partial {
    mpdi: f64,
    bc: f64,
    grad: Option<Vec<f64>>,
}

/// Evaluates `mu1 * L_mpdi + mu2 * L_bc` on `batch` and, with `want_grad`,
/// its gradient with respect to the network parameters.
pub fn evaluate(
    system: &SystemModel,
    net: &Mlp,
    batch: &CollocationSet,
    spec: &LossSpec,
    want_grad: bool,
) -> Result<LossEvaluation> {
    let (n, p) = (system.n(), system.p());
    if batch.is_empty() {
        return Err(Error::Precondition("loss needs a nonempty batch".into()));
    }
    if batch.n() != n || batch.p() != p {
        return Err(Error::shape("collocation point", n + p, batch.n() + batch.p()));
    }
    spec.check_consistent(n)?;
    if net.input_dim() != n + p {
        return Err(Error::shape("network input", n + p, net.input_dim()));
    }
    if net.output_dim() != n {
        return Err(Error::shape("network output", n, net.output_dim()));
    }
    let total_points = batch.len();
    let inv_n = 1.0 / total_points as f64;
    let starts: Vec<usize> = (0..total_points).step_by(CHUNK).collect();
    let partials: Vec<Result<Partial>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(total_points);
            evaluate_chunk(system, net, batch, spec, start..end, inv_n, want_grad)
        })
        .collect();
    let mut mpdi = 0.0;
    let mut bc = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; net.param_count()]);
    for part in partials {
        let part = part?;
        mpdi += part.mpdi;
        bc += part.bc;
        if let (Some(g), Some(pg)) = (grad.as_mut(), part.grad) {
            for (a, b) in g.iter_mut().zip(pg) {
                *a += b;
            }
        }
    }
    mpdi *= inv_n;
    bc *= inv_n;
    let total = spec.mu1 * mpdi + spec.mu2 * bc;
    if !total.is_finite() {
        return Err(Error::NonFiniteValue("total loss"));
    }
    Ok(LossEvaluation {
        total,
        mpdi,
        bc,
        gradient: grad,
    })
}

fn evaluate_chunk(
    system: &SystemModel,
    net: &Mlp,
    batch: &CollocationSet,
    spec: &LossSpec,
    range: std::ops::Range<usize>,
    inv_n: f64,
    want_grad: bool,
) -> Result<Partial> {
    let (n, p) = (system.n(), system.p());
    let mut jac_tape = Tape::new(net, n);
    let mut bc_tape = Tape::new(net, 0);
    let mut input = vec![0.0; n + p];
    let mut jf = vec![0.0; n * n];
    let mut d = vec![0.0; n * n];
    let mut slopes = vec![0.0; n];
    let mut d_bar = vec![0.0; n * n];
    let mut jk_bar = vec![0.0; n * n];
    let mut out_bar = vec![0.0; n];
    let zeros = vec![0.0; n];
    let mut hx = vec![0.0; p];
    let mut grad = want_grad.then(|| vec![0.0; net.param_count()]);
    let mut mpdi = 0.0;
    let mut bc = 0.0;
    for j in range {
        let (x_hat, y) = (batch.x_hat(j), batch.y(j));

        // contraction term
        input[..n].copy_from_slice(x_hat);
        input[n..].copy_from_slice(y);
        jac_tape.record(net, &input);
        system.jac_into(x_hat, &mut jf);
        assemble(&jf, jac_tape.jacobian(), n, spec.lambda, &mut d);
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "contraction matrix",
                index: j,
            });
        }
        let minors = leading_minors(&d, n);
        mpdi += penalty_and_slopes(&minors, spec, &mut slopes);
        if let Some(g) = grad.as_mut() {
            if spec.mu1 != 0.0 && slopes.iter().any(|&s| s != 0.0) {
                d_bar.iter_mut().for_each(|v| *v = 0.0);
                for (k, &slope) in slopes.iter().enumerate() {
                    if slope == 0.0 {
                        continue;
                    }
                    let size = k + 1;
                    let cof = linalg::cofactor_matrix(&linalg::leading_block(&d, n, size), size);
                    for r in 0..size {
                        for c in 0..size {
                            d_bar[r * n + c] += slope * cof[r * size + c];
                        }
                    }
                }
                let scale = spec.mu1 * inv_n;
                for r in 0..n {
                    for c in 0..n {
                        jk_bar[r * n + c] = 0.5 * scale * (d_bar[r * n + c] + d_bar[c * n + r]);
                    }
                }
                jac_tape.backward(net, &zeros, Some(&jk_bar), g);
            }
        }

        // boundary term at (x_hat, h(x_hat))
        system.h_into(x_hat, &mut hx);
        input[n..].copy_from_slice(&hx);
        bc_tape.record(net, &input);
        let k = bc_tape.output();
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "boundary-condition gain",
                index: j,
            });
        }
        bc += k.iter().map(|v| v * v).sum::<f64>();
        if let Some(g) = grad.as_mut() {
            if spec.mu2 != 0.0 {
                let scale = 2.0 * spec.mu2 * inv_n;
                for (o, &kv) in out_bar.iter_mut().zip(k) {
                    *o = scale * kv;
                }
                bc_tape.backward(net, &out_bar, None, g);
            }
        }
    }
    if let Some(g) = grad.as_ref() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("loss gradient"));
        }
    }
    Ok(Partial { mpdi, bc, grad })
}

/// `(1/N) sum_j sum_i rho_i l_i`.
pub fn mpdi_loss(system: &SystemModel, net: &Mlp, batch: &CollocationSet, spec: &LossSpec) -> Result<f64> {
    Ok(evaluate(system, net, batch, spec, false)?.mpdi)
}

/// `(1/N) sum_j |k(x_hat_j, h(x_hat_j))|^2`.
pub fn bc_loss(system: &SystemModel, net: &Mlp, batch: &CollocationSet) -> Result<f64> {
    let spec = LossSpec {
        lambda: 0.0,
        mu1: 0.0,
        mu2: 1.0,
        rho: vec![0.0; system.n()],
        penalty_form: PenaltyForm::Hinge,
    };
    Ok(evaluate(system, net, batch, &spec, false)?.bc)
}

pub fn total_loss(system: &SystemModel, net: &Mlp, batch: &CollocationSet, spec: &LossSpec) -> Result<f64> {
    Ok(evaluate(system, net, batch, spec, false)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Activation;
    use crate::systems::{linear, vanderpol, BoxDomain};

    fn zero_field() -> SystemModel {
        linear(
            "zero",
            vec![0.0; 4],
            vec![1.0, 0.0],
            BoxDomain::symmetric(&[1.0, 1.0]).unwrap(),
            BoxDomain::symmetric(&[1.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_net_zero_field_gives_two_lambda_identity() {
        let net = Mlp::zeros(&[3, 5, 2], Activation::Tanh).unwrap();
        let cm = contraction_matrix(&zero_field(), &net, &[0.3, -0.2], &[0.1], 1.0).unwrap();
        assert_eq!(cm.d, vec![2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn zero_net_vanderpol_origin() {
        let net = Mlp::zeros(&[3, 5, 2], Activation::Tanh).unwrap();
        let cm = contraction_matrix(&vanderpol(), &net, &[0.0, 0.0], &[0.0], 0.0).unwrap();
        assert_eq!(cm.d, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn minors_of_small_matrices() {
        assert_eq!(leading_minors(&[1.0, 0.0, 0.0, 1.0], 2), vec![1.0, 1.0]);
        assert_eq!(leading_minors(&[-1.0, 0.0, 0.0, -1.0], 2), vec![-1.0, 1.0]);
    }

    #[test]
    fn penalties() {
        let nsd = leading_minors(&[-1.0, 0.0, 0.0, -1.0], 2);
        assert_eq!(minor_penalty(&nsd, 1).unwrap(), 0.0);
        assert_eq!(minor_penalty(&nsd, 2).unwrap(), 0.0);
        let m = leading_minors(&[1.0, 0.0, 0.0, -1.0], 2);
        assert_eq!(minor_penalty(&m, 1).unwrap(), 1.0);
        let m = leading_minors(&[-1.0, 0.0, 0.0, 1.0], 2);
        assert_eq!(m[1], -1.0);
        assert_eq!(minor_penalty(&m, 2).unwrap(), 1.0);
        assert!(minor_penalty(&m, 0).is_err());
        assert!(minor_penalty(&m, 3).is_err());
    }

    #[test]
    fn weighted_penalty_of_single_point() {
        // D = diag(1, -1): Delta_1 = 1, Delta_2 = -1
        let spec = LossSpec {
            rho: vec![1.0, 0.1],
            ..LossSpec::vanderpol(2.5)
        };
        let mut slopes = [0.0; 2];
        let value = penalty_and_slopes(&leading_minors(&[1.0, 0.0, 0.0, -1.0], 2), &spec, &mut slopes);
        assert!((value - 1.1).abs() < 1e-15);
        let sq = LossSpec {
            penalty_form: PenaltyForm::SquaredHinge,
            rho: vec![1.0, 0.1],
            ..LossSpec::vanderpol(2.5)
        };
        let value = penalty_and_slopes(&leading_minors(&[2.0, 0.0, 0.0, -1.0], 2), &sq, &mut slopes);
        // 4 + 0.1 * 4
        assert!((value - 4.4).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        assert!(LossSpec::new(-1.0, 1.0, 1.0, vec![1.0, 1.0]).is_err());
        assert!(LossSpec::new(2.5, -1.0, 1.0, vec![1.0, 1.0]).is_err());
        let warn = LossSpec::vanderpol(1.5).validate(2).unwrap();
        assert_eq!(warn.len(), 1);
        assert!(LossSpec::vanderpol(2.5).validate(2).unwrap().is_empty());
        assert!(LossSpec::vanderpol(2.5).validate(3).is_err());
    }
}
