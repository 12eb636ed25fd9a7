//! Adam and L-BFGS on flat parameter vectors, and the two-phase training
//! loop that runs Adam first and then L-BFGS on the full collocation set.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{self, LossSpec};
use crate::network::Mlp;
use crate::sampling::{batches, CollocationSet};
use crate::systems::SystemModel;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize) -> Self {
        Self::with_moments(dim, 0.9, 0.999, 1e-8)
    }

    pub fn with_moments(dim: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], alpha: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape("adam parameters", self.m.len(), params.len()));
        }
        if grad.len() != params.len() {
            return Err(Error::shape("adam gradient", params.len(), grad.len()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteValue("gradient"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= alpha * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Result of one L-BFGS iteration.
#[derive(Debug, Clone)]
pub struct LbfgsStep {
    pub accepted: bool,
    pub step_length: f64,
    pub trials: usize,
    /// Loss and gradient at the (possibly unchanged) parameters.
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Limited-memory BFGS with two-loop recursion and Armijo backtracking.
#[derive(Debug, Clone)]
pub struct Lbfgs {
    pub history: usize,
    pub armijo: f64,
    pub max_halvings: usize,
    pub curvature_eps: f64,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
}

impl Lbfgs {
    pub fn new(history: usize) -> Self {
        Lbfgs {
            history: history.max(1),
            armijo: 1e-4,
            max_halvings: 25,
            curvature_eps: 1e-10,
            s: VecDeque::new(),
            y: VecDeque::new(),
        }
    }

    pub fn stored_pairs(&self) -> usize {
        self.s.len()
    }

    pub fn reset(&mut self) {
        self.s.clear();
        self.y.clear();
    }

    /// `-H grad` from the stored curvature pairs; `-grad` when empty.
    pub fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let k = self.s.len();
        let mut alphas = vec![0.0; k];
        let mut rhos = vec![0.0; k];
        for i in (0..k).rev() {
            rhos[i] = 1.0 / dot(&self.y[i], &self.s[i]);
            alphas[i] = rhos[i] * dot(&self.s[i], &q);
            axpy(-alphas[i], &self.y[i], &mut q);
        }
        if k > 0 {
            let gamma = dot(&self.s[k - 1], &self.y[k - 1]) / dot(&self.y[k - 1], &self.y[k - 1]);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let b = rhos[i] * dot(&self.y[i], &q);
            axpy(alphas[i] - b, &self.s[i], &mut q);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// One iteration from `params` with known `loss` and `grad`.
    ///
    /// Trial steps start at `beta` and halve until the Armijo condition
    /// holds. After `max_halvings` failures the step is rejected, the
    /// history is cleared and `params` is left untouched.
    pub fn step<F>(&mut self, params: &mut [f64], loss: f64, grad: &[f64], beta: f64, mut eval: F) -> Result<LbfgsStep>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let mut dir = self.direction(grad);
        let mut slope = dot(grad, &dir);
        if !(slope < 0.0) {
            // not a descent direction: fall back to steepest descent
            self.reset();
            dir = grad.iter().map(|g| -g).collect();
            slope = -dot(grad, grad);
        }
        if slope == 0.0 {
            return Ok(LbfgsStep {
                accepted: false,
                step_length: 0.0,
                trials: 0,
                loss,
                grad: grad.to_vec(),
            });
        }
        let mut t = beta;
        let mut trial = vec![0.0; params.len()];
        for attempt in 0..=self.max_halvings {
            for ((x, p), d) in trial.iter_mut().zip(params.iter()).zip(&dir) {
                *x = p + t * d;
            }
            // a failed evaluation (non-finite values) counts as a rejected trial
            if let Ok((f_new, g_new)) = eval(&trial) {
                if f_new.is_finite() && f_new <= loss + self.armijo * t * slope {
                    let s: Vec<f64> = trial.iter().zip(params.iter()).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = g_new.iter().zip(grad).map(|(a, b)| a - b).collect();
                    if dot(&s, &y) > self.curvature_eps {
                        if self.s.len() == self.history {
                            self.s.pop_front();
                            self.y.pop_front();
                        }
                        self.s.push_back(s);
                        self.y.push_back(y);
                    } else {
                        // Armijo alone does not enforce positive curvature; the
                        // stored pairs are stale once it fails, and keeping them
                        // stalls the iteration on tiny steps
                        self.reset();
                    }
                    params.copy_from_slice(&trial);
                    return Ok(LbfgsStep {
                        accepted: true,
                        step_length: t,
                        trials: attempt + 1,
                        loss: f_new,
                        grad: g_new,
                    });
                }
            }
            t *= 0.5;
        }
        self.reset();
        Ok(LbfgsStep {
            accepted: false,
            step_length: 0.0,
            trials: self.max_halvings + 1,
            loss,
            grad: grad.to_vec(),
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_history() -> usize {
    10
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub adam_epochs: usize,
    pub lbfgs_epochs: usize,
    /// Adam learning rate.
    pub alpha: f64,
    /// Initial L-BFGS trial step.
    pub beta: f64,
    #[serde(default = "default_betas")]
    pub adam_betas: [f64; 2],
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_history")]
    pub lbfgs_history: usize,
    /// Adam minibatch size; `None` means the full set.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Calls the checkpoint hook every this many epochs (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Global-norm gradient clip for the Adam phase.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Record wall-clock seconds per epoch. Off gives byte-reproducible
    /// loss histories.
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam_epochs: 500,
            lbfgs_epochs: 500,
            alpha: 1e-3,
            beta: 1.0,
            adam_betas: default_betas(),
            adam_eps: default_adam_eps(),
            lbfgs_history: default_history(),
            batch_size: None,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: None,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)?;
        positive("adam_eps", self.adam_eps)?;
        for (i, b) in self.adam_betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return Err(Error::Config(format!("adam_betas[{i}] must lie in [0, 1), got {b}")));
            }
        }
        if self.lbfgs_history == 0 {
            return Err(Error::Config("lbfgs_history must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            positive("grad_clip", c)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Adam,
    Lbfgs,
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::Adam => "adam",
            Phase::Lbfgs => "lbfgs",
        }
    }
}

/// One row of the loss history.
///
/// Adam rows hold the loss at the start of the epoch (averaged over its
/// batches); L-BFGS rows hold the loss after the epoch's step.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub total: f64,
    pub mpdi: f64,
    pub bc: f64,
    pub grad_norm: f64,
    pub seconds: f64,
    /// `false` for an L-BFGS step rejected by the line search.
    pub accepted: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_mpdi: f64,
    pub final_bc: f64,
    pub rejected_lbfgs_steps: usize,
}

impl TrainRecord {
    /// Delimited text with a header; `preamble` lines are emitted first,
    /// each prefixed with `# `.
    pub fn to_csv(&self, preamble: &str) -> String {
        let mut s = String::new();
        for line in preamble.lines() {
            let _ = writeln!(s, "# {line}");
        }
        let _ = writeln!(s, "epoch,phase,total,mpdi,bc,grad_norm,seconds");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.6}",
                r.epoch,
                r.phase.tag(),
                r.total,
                r.mpdi,
                r.bc,
                r.grad_norm,
                r.seconds
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path, preamble: &str) -> Result<()> {
        std::fs::write(path, self.to_csv(preamble))?;
        Ok(())
    }
}

/// Trains `net` with the default no-op checkpoint hook.
pub fn train(
    system: &SystemModel,
    net: &Mlp,
    collocation: &CollocationSet,
    spec: &LossSpec,
    config: &TrainConfig,
) -> Result<(Mlp, TrainRecord)> {
    train_with_hook(system, net, collocation, spec, config, |_, _| Ok(()))
}

/// Adam for `adam_epochs` passes over the (mini)batches, then L-BFGS for
/// `lbfgs_epochs` full-batch iterations. `hook(epoch, net)` runs every
/// `checkpoint_every` epochs. On a numeric failure the error carries the
/// last network whose parameters were all finite.
pub fn train_with_hook<H>(
    system: &SystemModel,
    net: &Mlp,
    collocation: &CollocationSet,
    spec: &LossSpec,
    config: &TrainConfig,
    mut hook: H,
) -> Result<(Mlp, TrainRecord)>
where
    H: FnMut(usize, &Mlp) -> Result<()>,
{
    config.validate()?;
    for w in spec.validate(system.n())? {
        log::warn!("{w}");
    }
    let mut record = TrainRecord::default();
    let initial = loss::evaluate(system, net, collocation, spec, false)?;
    record.initial_loss = initial.total;
    let mut current = net.clone();
    let mut params = current.pack().0;
    let started = Instant::now();
    let elapsed = |config: &TrainConfig| {
        if config.record_wall_time {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };
    let abort = |epoch: usize, reason: String, last_good: &Mlp| Error::TrainingAborted {
        epoch,
        reason,
        last_good: Box::new(last_good.clone()),
    };

    let batch_size = config.batch_size.unwrap_or(collocation.len()).min(collocation.len());
    let mut adam = Adam::with_moments(params.len(), config.adam_betas[0], config.adam_betas[1], config.adam_eps);
    let mut epoch = 0;
    for q in 0..config.adam_epochs {
        epoch += 1;
        let parts = batches(collocation, batch_size, config.seed.wrapping_add(q as u64))?;
        let (mut total, mut mpdi, mut bc, mut gn) = (0.0, 0.0, 0.0, 0.0);
        for batch in &parts {
            let eval = loss::evaluate(system, &current, batch, spec, true)
                .map_err(|e| abort(epoch, e.to_string(), &current))?;
            let w = batch.len() as f64 / collocation.len() as f64;
            total += w * eval.total;
            mpdi += w * eval.mpdi;
            bc += w * eval.bc;
            let mut grad = eval.gradient.expect("gradient requested");
            let g_norm = norm(&grad);
            gn += w * g_norm;
            if let Some(clip) = config.grad_clip {
                if g_norm > clip {
                    grad.iter_mut().for_each(|g| *g *= clip / g_norm);
                }
            }
            adam.step(&mut params, &grad, config.alpha)
                .map_err(|e| abort(epoch, e.to_string(), &current))?;
            if params.iter().any(|v| !v.is_finite()) {
                return Err(abort(epoch, "non-finite parameters after Adam step".into(), &current));
            }
            current.set_params(&params)?;
        }
        record.epochs.push(EpochRecord {
            epoch,
            phase: Phase::Adam,
            total,
            mpdi,
            bc,
            grad_norm: gn,
            seconds: elapsed(config),
            accepted: true,
        });
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            hook(epoch, &current)?;
        }
    }

    if config.lbfgs_epochs > 0 {
        let mut lbfgs = Lbfgs::new(config.lbfgs_history);
        let eval0 = loss::evaluate(system, &current, collocation, spec, true)
            .map_err(|e| abort(epoch + 1, e.to_string(), &current))?;
        let mut f = eval0.total;
        let mut g = eval0.gradient.expect("gradient requested");
        for _ in 0..config.lbfgs_epochs {
            epoch += 1;
            let probe = current.clone();
            let mut last_parts = (f64::NAN, f64::NAN);
            let step = lbfgs.step(&mut params, f, &g, config.beta, |theta| {
                let mut trial = probe.clone();
                trial.set_params(theta)?;
                let e = loss::evaluate(system, &trial, collocation, spec, true)?;
                last_parts = (e.mpdi, e.bc);
                Ok((e.total, e.gradient.expect("gradient requested")))
            })?;
            if !step.accepted {
                record.rejected_lbfgs_steps += 1;
            } else {
                current.set_params(&params)?;
            }
            let (mpdi, bc) = if step.accepted {
                last_parts
            } else {
                let e = loss::evaluate(system, &current, collocation, spec, false)
                    .map_err(|e| abort(epoch, e.to_string(), &current))?;
                (e.mpdi, e.bc)
            };
            f = step.loss;
            g = step.grad;
            record.epochs.push(EpochRecord {
                epoch,
                phase: Phase::Lbfgs,
                total: f,
                mpdi,
                bc,
                grad_norm: norm(&g),
                seconds: elapsed(config),
                accepted: step.accepted,
            });
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                hook(epoch, &current)?;
            }
        }
    }

    let last = loss::evaluate(system, &current, collocation, spec, false)
        .map_err(|e| abort(epoch, e.to_string(), &current))?;
    record.final_loss = last.total;
    record.final_mpdi = last.mpdi;
    record.final_bc = last.bc;
    Ok((current, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = Adam::new(3);
        let mut p = vec![1.0, -2.0, 3.0];
        for _ in 0..10 {
            adam.step(&mut p, &[0.0; 3], 0.1).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_has_magnitude_alpha() {
        for g in [1e-3, 1.0, 250.0] {
            let mut adam = Adam::new(1);
            let mut p = vec![0.0];
            adam.step(&mut p, &[g], 0.01).unwrap();
            assert!((p[0] + 0.01).abs() < 1e-6, "g={g}: {}", p[0]);
        }
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut adam = Adam::new(2);
        let mut p = vec![0.0, 0.0];
        assert!(adam.step(&mut p, &[f64::NAN, 0.0], 0.1).is_err());
        assert!(adam.step(&mut p, &[0.0], 0.1).is_err());
    }

    #[test]
    fn empty_history_gives_steepest_descent() {
        let lbfgs = Lbfgs::new(5);
        assert_eq!(lbfgs.direction(&[1.0, -2.0]), vec![-1.0, 2.0]);
    }

    #[test]
    fn first_lbfgs_step_follows_negative_gradient() {
        // f = |x|^2 from (1, 1): full step beta = 1 overshoots to (-1, -1)
        // with equal loss, the first halving lands on the minimizer
        let mut lbfgs = Lbfgs::new(5);
        let mut x = vec![1.0, 1.0];
        let step = lbfgs
            .step(&mut x, 2.0, &[2.0, 2.0], 1.0, |t| Ok((t[0] * t[0] + t[1] * t[1], vec![2.0 * t[0], 2.0 * t[1]])))
            .unwrap();
        assert!(step.accepted);
        assert_eq!(step.step_length, 0.5);
        assert_eq!(x, vec![0.0, 0.0]);
    }

    #[test]
    fn line_search_failure_rejects_and_resets() {
        let mut lbfgs = Lbfgs::new(5);
        let mut x = vec![1.0];
        // an objective that reports growth everywhere away from x
        let step = lbfgs.step(&mut x, 0.0, &[1.0], 1.0, |_| Ok((1.0, vec![1.0]))).unwrap();
        assert!(!step.accepted);
        assert_eq!(x, vec![1.0]);
        assert_eq!(lbfgs.stored_pairs(), 0);
    }
}
