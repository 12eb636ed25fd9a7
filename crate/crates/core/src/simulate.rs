//! Closed-loop simulation of plant and learned observer.
//!
//! The plant `x' = f(x)` and the observer `x_hat' = f(x_hat) + k(x_hat, y_e)`
//! are integrated together as one `2n`-dimensional system with a fixed
//! step. Measurement noise `v` is drawn once per step and held over all
//! stages of that step, so `y_e = h(x) + v` is piecewise constant in `v`.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Mlp;
use crate::systems::SystemModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Rk4,
    Euler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub t_final: f64,
    pub dt: f64,
    pub x0: Vec<f64>,
    pub xhat0: Vec<f64>,
    /// Standard deviation of the additive Gaussian output noise.
    pub noise_sigma: f64,
    #[serde(default)]
    pub noise_seed: u64,
    #[serde(default)]
    pub method: Integrator,
}

impl SimConfig {
    /// 20 s at 1 ms, observer at the origin, 0.15 output noise.
    pub fn new(x0: Vec<f64>) -> Self {
        let n = x0.len();
        SimConfig {
            t_final: 20.0,
            dt: 1e-3,
            x0,
            xhat0: vec![0.0; n],
            noise_sigma: 0.15,
            noise_seed: 0,
            method: Integrator::Rk4,
        }
    }

    /// Default experiment for a built-in system.
    pub fn for_system(name: &str) -> Option<Self> {
        match name {
            "vanderpol" => Some(Self::new(vec![-1.0, 2.5])),
            "reverse_duffing" => Some(Self::new(vec![-0.5, 0.5])),
            _ => None,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final.is_finite() && self.t_final >= self.dt) {
            return Err(Error::Config(format!(
                "t_final must be at least dt, got {}",
                self.t_final
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        if self.x0.len() != n {
            return Err(Error::shape("x0", n, self.x0.len()));
        }
        if self.xhat0.len() != n {
            return Err(Error::shape("xhat0", n, self.xhat0.len()));
        }
        if self.x0.iter().chain(&self.xhat0).any(|v| !v.is_finite()) {
            return Err(Error::Config("initial states must be finite".into()));
        }
        Ok(())
    }
}

/// Sampled closed-loop trajectory. All vectors share one length.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub x_hat: Vec<Vec<f64>>,
    /// Noisy output held over the step starting at each sample.
    pub y_e: Vec<Vec<f64>>,
    pub err_norm: Vec<f64>,
    /// Set when the integration stopped early on a non-finite state.
    pub diagnostic: Option<String>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Header `t,x1..xn,xhat1..xhatn,ye1..yep,err_norm`, preceded by the
    /// `preamble` lines as `# ` comments.
    pub fn to_csv(&self, preamble: &str) -> String {
        let n = self.x.first().map_or(0, Vec::len);
        let p = self.y_e.first().map_or(0, Vec::len);
        let mut s = String::new();
        for line in preamble.lines() {
            let _ = writeln!(s, "# {line}");
        }
        if let Some(d) = &self.diagnostic {
            let _ = writeln!(s, "# diagnostic: {d}");
        }
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=n).map(|i| format!("xhat{i}")));
        header.extend((1..=p).map(|i| format!("ye{i}")));
        header.push("err_norm".into());
        let _ = writeln!(s, "{}", header.join(","));
        for i in 0..self.len() {
            let mut row = vec![format!("{:.6}", self.t[i])];
            row.extend(self.x[i].iter().map(|v| format!("{v:.12e}")));
            row.extend(self.x_hat[i].iter().map(|v| format!("{v:.12e}")));
            row.extend(self.y_e[i].iter().map(|v| format!("{v:.12e}")));
            row.push(format!("{:.12e}", self.err_norm[i]));
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    pub fn write_csv(&self, path: &Path, preamble: &str) -> Result<()> {
        std::fs::write(path, self.to_csv(preamble))?;
        Ok(())
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Coupled right-hand side for a fixed noise sample `v`.
struct ClosedLoop<'a> {
    system: &'a SystemModel,
    net: &'a Mlp,
    input: Vec<f64>,
    gain: Vec<f64>,
    fx: Vec<f64>,
}

impl ClosedLoop<'_> {
    fn rhs(&mut self, state: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.system.n();
        let (x, x_hat) = state.split_at(n);
        self.system.f_into(x, &mut out[..n]);
        self.system.f_into(x_hat, &mut self.fx);
        self.input[..n].copy_from_slice(x_hat);
        self.system.h_into(x, &mut self.input[n..]);
        for (y, vi) in self.input[n..].iter_mut().zip(v) {
            *y += vi;
        }
        self.net.forward_into(&self.input, &mut self.gain);
        for i in 0..n {
            out[n + i] = self.fx[i] + self.gain[i];
        }
    }
}

pub fn simulate(system: &SystemModel, net: &Mlp, config: &SimConfig) -> Result<Trajectory> {
    let (n, p) = (system.n(), system.p());
    config.validate(n)?;
    if net.input_dim() != n + p {
        return Err(Error::shape("network input", n + p, net.input_dim()));
    }
    if net.output_dim() != n {
        return Err(Error::shape("network output", n, net.output_dim()));
    }
    let steps = (config.t_final / config.dt).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.noise_seed);
    let normal = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut draw = |v: &mut [f64]| {
        for vi in v.iter_mut() {
            *vi = if config.noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        }
    };

    let mut sys = ClosedLoop {
        system,
        net,
        input: vec![0.0; n + p],
        gain: vec![0.0; n],
        fx: vec![0.0; n],
    };
    let mut state = [config.x0.as_slice(), config.xhat0.as_slice()].concat();
    let dim = 2 * n;
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut stage = vec![0.0; dim];
    let mut v = vec![0.0; p];
    let mut hx = vec![0.0; p];

    let mut traj = Trajectory {
        t: Vec::with_capacity(steps + 1),
        x: Vec::with_capacity(steps + 1),
        x_hat: Vec::with_capacity(steps + 1),
        y_e: Vec::with_capacity(steps + 1),
        err_norm: Vec::with_capacity(steps + 1),
        diagnostic: None,
    };
    let h = config.dt;
    for i in 0..=steps {
        draw(&mut v);
        system.h_into(&state[..n], &mut hx);
        traj.t.push(i as f64 * h);
        traj.x.push(state[..n].to_vec());
        traj.x_hat.push(state[n..].to_vec());
        traj.y_e.push(hx.iter().zip(&v).map(|(a, b)| a + b).collect());
        traj.err_norm.push(distance(&state[..n], &state[n..]));
        if i == steps {
            break;
        }
        match config.method {
            Integrator::Euler => {
                sys.rhs(&state, &v, &mut k1);
                for (s, k) in state.iter_mut().zip(&k1) {
                    *s += h * k;
                }
            }
            Integrator::Rk4 => {
                sys.rhs(&state, &v, &mut k1);
                for j in 0..dim {
                    stage[j] = state[j] + 0.5 * h * k1[j];
                }
                sys.rhs(&stage, &v, &mut k2);
                for j in 0..dim {
                    stage[j] = state[j] + 0.5 * h * k2[j];
                }
                sys.rhs(&stage, &v, &mut k3);
                for j in 0..dim {
                    stage[j] = state[j] + h * k3[j];
                }
                sys.rhs(&stage, &v, &mut k4);
                for j in 0..dim {
                    state[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
                }
            }
        }
        if state.iter().any(|s| !s.is_finite()) {
            traj.diagnostic = Some(format!(
                "state became non-finite during the step from t = {:.6}; trajectory truncated",
                i as f64 * h
            ));
            break;
        }
    }
    Ok(traj)
}

/// Normalized mean squared estimation error in percent:
/// `100 * mean |x - x_hat|^2 / mean |x|^2` over samples from
/// `floor(settle_fraction * len)` on.
pub fn mse_percent(traj: &Trajectory, settle_fraction: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&settle_fraction) {
        return Err(Error::Precondition(format!(
            "settle_fraction must lie in [0, 1), got {settle_fraction}"
        )));
    }
    if traj.is_empty() {
        return Err(Error::UndefinedMetric("empty trajectory".into()));
    }
    let start = ((settle_fraction * traj.len() as f64).floor() as usize).min(traj.len() - 1);
    let window = start..traj.len();
    let count = window.len() as f64;
    let err: f64 = window.clone().map(|i| traj.err_norm[i].powi(2)).sum::<f64>() / count;
    let energy: f64 = window
        .map(|i| traj.x[i].iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / count;
    if energy == 0.0 {
        return Err(Error::UndefinedMetric("plant state has zero energy over the window".into()));
    }
    Ok(100.0 * err / energy)
}

/// Largest realized noise norm `|y_e - h(x)|` along a trajectory.
pub fn observed_noise_bound(system: &SystemModel, traj: &Trajectory) -> f64 {
    let mut hx = vec![0.0; system.p()];
    traj.x
        .iter()
        .zip(&traj.y_e)
        .map(|(x, ye)| {
            system.h_into(x, &mut hx);
            distance(ye, &hx)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IssEnvelope {
    /// `|e(0)| exp(-eta t) + (eps_bar + L v_bar) / (2 sqrt(eta))` per sample.
    pub bound: Vec<f64>,
    pub violations: usize,
    pub violation_fraction: f64,
    pub first_violation: Option<usize>,
}

/// Evaluates the input-to-state error envelope on the trajectory grid and
/// counts samples where the error exceeds it.
pub fn iss_envelope(traj: &Trajectory, eta: f64, eps_bar: f64, lipschitz: f64, v_bar: f64) -> Result<IssEnvelope> {
    if !(eta > 0.0) {
        return Err(Error::Precondition(format!(
            "the error envelope needs eta = lambda - 2 > 0 (contraction rate above 2), got eta = {eta}"
        )));
    }
    if traj.is_empty() {
        return Err(Error::UndefinedMetric("empty trajectory".into()));
    }
    let e0 = traj.err_norm[0];
    let floor = (eps_bar + lipschitz * v_bar) / (2.0 * eta.sqrt());
    let bound: Vec<f64> = traj.t.iter().map(|&t| e0 * (-eta * t).exp() + floor).collect();
    let mut violations = 0;
    let mut first = None;
    for (i, (&e, &b)) in traj.err_norm.iter().zip(&bound).enumerate() {
        if e > b {
            violations += 1;
            first.get_or_insert(i);
        }
    }
    Ok(IssEnvelope {
        violation_fraction: violations as f64 / bound.len() as f64,
        bound,
        violations,
        first_violation: first,
    })
}
