//! Plant models: vector field, analytic Jacobian, output map and the
//! axis-aligned domain the observer gain is trained on.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `out <- g(x)`.
pub type VectorMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Closed axis-aligned box `[lo_1, hi_1] x ... x [lo_k, hi_k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let b = BoxDomain { lo, hi };
        b.check()?;
        Ok(b)
    }

    /// Symmetric box `[-r_i, r_i]` per axis.
    pub fn symmetric(radii: &[f64]) -> Result<Self> {
        Self::new(radii.iter().map(|r| -r).collect(), radii.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Rejects mismatched bounds, non-finite bounds and empty intervals.
    /// Degenerate intervals `[a, a]` are allowed.
    pub fn check(&self) -> Result<()> {
        if self.lo.len() != self.hi.len() {
            return Err(Error::Config(format!(
                "box bounds have different lengths ({} vs {})",
                self.lo.len(),
                self.hi.len()
            )));
        }
        for (axis, (&lo, &hi)) in self.lo.iter().zip(&self.hi).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("box axis {axis} has a non-finite bound")));
            }
            if lo > hi {
                return Err(Error::Config(format!(
                    "box axis {axis} is empty: [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }

    /// Euclidean length of the box diagonal.
    pub fn diameter(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(lo, hi)| (hi - lo).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Uniform draw; every coordinate lands in `[lo, hi]`.
    pub fn sample<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        for ((o, &lo), &hi) in out.iter_mut().zip(&self.lo).zip(&self.hi) {
            let u: f64 = rng.gen();
            *o = (lo + (hi - lo) * u).clamp(lo, hi);
        }
    }

    /// `k`-th node of a uniform grid with `per_axis` nodes along each axis,
    /// endpoints included. Axis 0 varies slowest.
    pub fn grid_point(&self, per_axis: usize, mut k: usize, out: &mut [f64]) {
        let d = self.dim();
        for axis in (0..d).rev() {
            let idx = k % per_axis;
            k /= per_axis;
            out[axis] = grid_coord(self.lo[axis], self.hi[axis], per_axis, idx);
        }
    }
}

pub(crate) fn grid_coord(lo: f64, hi: f64, per_axis: usize, idx: usize) -> f64 {
    if per_axis <= 1 {
        return lo;
    }
    if idx + 1 >= per_axis {
        return hi;
    }
    // lo + (hi - lo) can round past hi
    (lo + (hi - lo) * idx as f64 / (per_axis - 1) as f64).min(hi)
}

/// A smooth autonomous plant `x' = f(x)`, `y = h(x)` together with the
/// training domain. Immutable after construction.
#[derive(Clone)]
pub struct SystemModel {
    name: String,
    n: usize,
    p: usize,
    f: VectorMap,
    jac_f: VectorMap,
    h: VectorMap,
    domain_x: BoxDomain,
    domain_y: BoxDomain,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("p", &self.p)
            .field("domain_x", &self.domain_x)
            .field("domain_y", &self.domain_y)
            .finish()
    }
}

impl SystemModel {
    /// Registers a user system. `jac_f` must write the row-major `n x n`
    /// Jacobian of `f`. Forward invariance of `domain_x` is the caller's
    /// responsibility and is not checked.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        n: usize,
        p: usize,
        f: VectorMap,
        jac_f: VectorMap,
        h: VectorMap,
        domain_x: BoxDomain,
        domain_y: BoxDomain,
    ) -> Result<Self> {
        if n == 0 || p == 0 {
            return Err(Error::Config("state and output dimensions must be positive".into()));
        }
        domain_x.check()?;
        domain_y.check()?;
        if domain_x.dim() != n {
            return Err(Error::shape("state domain", n, domain_x.dim()));
        }
        if domain_y.dim() != p {
            return Err(Error::shape("output domain", p, domain_y.dim()));
        }
        Ok(SystemModel {
            name: name.into(),
            n,
            p,
            f,
            jac_f,
            h,
            domain_x,
            domain_y,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn domain_x(&self) -> &BoxDomain {
        &self.domain_x
    }

    pub fn domain_y(&self) -> &BoxDomain {
        &self.domain_y
    }

    pub fn f_into(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }

    pub fn jac_into(&self, x: &[f64], out: &mut [f64]) {
        (self.jac_f)(x, out)
    }

    pub fn h_into(&self, x: &[f64], out: &mut [f64]) {
        (self.h)(x, out)
    }

    pub fn f(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.f_into(x, &mut out);
        out
    }

    /// Row-major `n x n` Jacobian of `f` at `x`.
    pub fn jac_f(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        self.jac_into(x, &mut out);
        out
    }

    pub fn h(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p];
        self.h_into(x, &mut out);
        out
    }

    /// Same dynamics with a different training box.
    pub fn with_domains(mut self, domain_x: BoxDomain, domain_y: BoxDomain) -> Result<Self> {
        domain_x.check()?;
        domain_y.check()?;
        if domain_x.dim() != self.n {
            return Err(Error::shape("state domain", self.n, domain_x.dim()));
        }
        if domain_y.dim() != self.p {
            return Err(Error::shape("output domain", self.p, domain_y.dim()));
        }
        self.domain_x = domain_x;
        self.domain_y = domain_y;
        Ok(self)
    }
}

/// Van der Pol oscillator with unit damping, measuring the position.
pub fn vanderpol() -> SystemModel {
    SystemModel::new(
        "vanderpol",
        2,
        1,
        Arc::new(|x: &[f64], out: &mut [f64]| {
            out[0] = x[1];
            out[1] = -x[0] + x[1] * (1.0 - x[0] * x[0]);
        }),
        Arc::new(|x: &[f64], out: &mut [f64]| {
            out[0] = 0.0;
            out[1] = 1.0;
            out[2] = -1.0 - 2.0 * x[0] * x[1];
            out[3] = 1.0 - x[0] * x[0];
        }),
        Arc::new(|x: &[f64], out: &mut [f64]| out[0] = x[0]),
        BoxDomain::symmetric(&[2.0, 3.0]).expect("static box"),
        BoxDomain::symmetric(&[2.0]).expect("static box"),
    )
    .expect("static system")
}

/// Reverse Duffing oscillator `x1' = x2^3`, `x2' = -x1`, measuring `x1`.
pub fn reverse_duffing() -> SystemModel {
    SystemModel::new(
        "reverse_duffing",
        2,
        1,
        Arc::new(|x: &[f64], out: &mut [f64]| {
            out[0] = x[1] * x[1] * x[1];
            out[1] = -x[0];
        }),
        Arc::new(|x: &[f64], out: &mut [f64]| {
            out[0] = 0.0;
            out[1] = 3.0 * x[1] * x[1];
            out[2] = -1.0;
            out[3] = 0.0;
        }),
        Arc::new(|x: &[f64], out: &mut [f64]| out[0] = x[0]),
        BoxDomain::symmetric(&[1.0, 1.0]).expect("static box"),
        BoxDomain::symmetric(&[1.0]).expect("static box"),
    )
    .expect("static system")
}

/// Linear plant `x' = A x`, `y = C x` (row-major `A`: n x n, `C`: p x n).
pub fn linear(
    name: impl Into<String>,
    a: Vec<f64>,
    c: Vec<f64>,
    domain_x: BoxDomain,
    domain_y: BoxDomain,
) -> Result<SystemModel> {
    let n = domain_x.dim();
    let p = domain_y.dim();
    if a.len() != n * n {
        return Err(Error::shape("linear system A", n * n, a.len()));
    }
    if c.len() != p * n {
        return Err(Error::shape("linear system C", p * n, c.len()));
    }
    let a = Arc::new(a);
    let c = Arc::new(c);
    let a_f = Arc::clone(&a);
    let a_j = Arc::clone(&a);
    SystemModel::new(
        name,
        n,
        p,
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = (0..n).map(|j| a_f[i * n + j] * x[j]).sum();
            }
        }),
        Arc::new(move |_x: &[f64], out: &mut [f64]| out.copy_from_slice(&a_j)),
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = (0..n).map(|j| c[i * n + j] * x[j]).sum();
            }
        }),
        domain_x,
        domain_y,
    )
}

pub const BUILTIN_SYSTEMS: &[&str] = &["vanderpol", "reverse_duffing"];

/// Looks up one of the built-in benchmark plants by name.
pub fn builtin(name: &str) -> Option<SystemModel> {
    match name {
        "vanderpol" | "van_der_pol" => Some(vanderpol()),
        "reverse_duffing" | "duffing" => Some(reverse_duffing()),
        _ => None,
    }
}

/// Outcome of the finite-difference Jacobian check.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub system: String,
    pub samples: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_relative_error: f64,
    pub worst_point: Vec<f64>,
    pub non_finite_points: usize,
    pub passed: bool,
}

/// Default relative tolerance for [`validate`].
pub const JACOBIAN_TOLERANCE: f64 = 1e-6;

/// Compares the analytic Jacobian against central differences at `samples`
/// uniform points of the state domain. Mismatches are reported, not raised.
///
/// The relative error at a point is `max_ij |J - J_fd| / max(1, max_ij |J|)`.
pub fn validate(model: &SystemModel, samples: usize, seed: u64) -> Result<ValidationReport> {
    if samples == 0 {
        return Err(Error::Precondition("validation needs at least one sample".into()));
    }
    let n = model.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; n];
    let mut worst = 0.0_f64;
    let mut worst_point = vec![0.0; n];
    let mut non_finite = 0;
    let mut fx = vec![0.0; n];
    let mut hx = vec![0.0; model.p()];
    for _ in 0..samples {
        model.domain_x().sample(&mut rng, &mut x);
        model.f_into(&x, &mut fx);
        model.h_into(&x, &mut hx);
        let analytic = model.jac_f(&x);
        let numeric = central_difference_jacobian(model, &x);
        if fx.iter().chain(&hx).chain(&analytic).any(|v| !v.is_finite()) {
            non_finite += 1;
            continue;
        }
        let scale = analytic.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let err = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max)
            / scale;
        if err > worst || err.is_nan() {
            worst = if err.is_nan() { f64::INFINITY } else { err };
            worst_point.copy_from_slice(&x);
        }
    }
    Ok(ValidationReport {
        system: model.name().to_string(),
        samples,
        seed,
        tolerance: JACOBIAN_TOLERANCE,
        max_relative_error: worst,
        worst_point,
        non_finite_points: non_finite,
        passed: worst < JACOBIAN_TOLERANCE && non_finite == 0,
    })
}

/// Central-difference Jacobian of `f`, row-major.
pub fn central_difference_jacobian(model: &SystemModel, x: &[f64]) -> Vec<f64> {
    let n = model.n();
    let mut out = vec![0.0; n * n];
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for j in 0..n {
        let h = 1e-5 * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        model.f_into(&xp, &mut fp);
        xp[j] = x[j] - h;
        model.f_into(&xp, &mut fm);
        xp[j] = x[j];
        for i in 0..n {
            out[i * n + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    out
}
