use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use contraction_observer::network::{Checkpoint, TrainingMeta};
use contraction_observer::optimize::{self, TrainRecord};
use contraction_observer::simulate::{self, SimConfig, Trajectory};
use contraction_observer::verify::{self, VerificationReport};
use contraction_observer::{sampling, systems, Error, Mlp, SystemModel};

use crate::config::{preamble, RunConfig};
use crate::error::CliError;

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub noise: Option<f64>,
    /// `Some(1)` is single-threaded mode: wall-clock columns are zeroed so
    /// reruns are byte-identical.
    pub threads: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(l) = self.lambda {
            cfg.loss.lambda = l;
        }
        if let Some(sigma) = self.noise {
            if let Some(sim) = cfg.sim.as_mut() {
                sim.noise_sigma = sigma;
            }
        }
        if self.threads == Some(1) {
            cfg.train.record_wall_time = false;
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn commented(preamble: &str, body: &str) -> String {
    let mut s = String::new();
    for line in preamble.lines() {
        let _ = writeln!(s, "# {line}");
    }
    s.push_str(body);
    s
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Checkpoint::from_toml(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

pub(crate) fn checkpoint_for(cfg: &RunConfig, net: &Mlp, epochs_completed: usize, final_loss: f64) -> Checkpoint {
    Checkpoint {
        net: net.clone(),
        meta: TrainingMeta {
            system: cfg.system.name.clone(),
            lambda: cfg.loss.lambda,
            mu1: cfg.loss.mu1,
            mu2: cfg.loss.mu2,
            rho: cfg.loss.rho.clone(),
            penalty_form: cfg.loss.penalty_form,
            seed: cfg.train.seed,
            adam_epochs: cfg.train.adam_epochs,
            lbfgs_epochs: cfg.train.lbfgs_epochs,
            epochs_completed,
            final_loss,
        },
    }
}

pub struct TrainOutcome {
    pub net: Mlp,
    pub record: TrainRecord,
    pub checkpoint_path: PathBuf,
    pub history_path: PathBuf,
    pub config_path: PathBuf,
    pub warnings: Vec<String>,
}

/// Samples, initializes and trains in memory. `cfg` must be resolved.
pub fn train_network(
    system: &SystemModel,
    cfg: &RunConfig,
    mut hook: impl FnMut(usize, &Mlp) -> contraction_observer::Result<()>,
) -> Result<(Mlp, TrainRecord), Error> {
    let collocation = sampling::sample_collocation(system, cfg.sampling.n_points, cfg.sampling.seed)?;
    let net = Mlp::init(&cfg.layer_dims(system), cfg.network.activation, cfg.network.seed)?;
    optimize::train_with_hook(system, &net, &collocation, &cfg.loss, &cfg.train, &mut hook)
}

/// Sampling and training, writing the checkpoint, loss history and the
/// resolved config to `cfg.out_dir`.
pub fn cmd_train(mut cfg: RunConfig) -> Result<TrainOutcome, CliError> {
    let system = cfg.system_model()?;
    let warnings = cfg.resolve(&system)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let dir = cfg.out_dir.clone();
    create_dir(&dir)?;
    let cfg_text = cfg.to_toml();
    let pre = preamble(&[], Some(&cfg_text));
    let config_path = dir.join("config.toml");
    write(&config_path, &commented("resolved configuration", &cfg_text))?;

    let result = train_network(&system, &cfg, |epoch, net| {
        let ck = checkpoint_for(&cfg, net, epoch, f64::NAN);
        let path = dir.join(format!("checkpoint_e{epoch:05}.toml"));
        fs::write(&path, commented(&pre, &ck.to_toml()))?;
        Ok(())
    });
    let (net, record) = match result {
        Ok(v) => v,
        Err(Error::TrainingAborted { epoch, reason, last_good }) => {
            let ck = checkpoint_for(&cfg, &last_good, epoch, f64::NAN);
            let path = dir.join("checkpoint_aborted.toml");
            write(&path, &commented(&pre, &ck.to_toml()))?;
            return Err(CliError::Numeric(format!(
                "training aborted at epoch {epoch}: {reason}; last finite network saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let epochs = record.epochs.len();
    let ck = checkpoint_for(&cfg, &net, epochs, record.final_loss);
    let checkpoint_path = dir.join("checkpoint.toml");
    write(&checkpoint_path, &commented(&pre, &ck.to_toml()))?;
    let history_path = dir.join("history.csv");
    write(&history_path, &record.to_csv(&pre))?;
    Ok(TrainOutcome {
        net,
        record,
        checkpoint_path,
        history_path,
        config_path,
        warnings,
    })
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub grid_per_axis: usize,
    pub tol: f64,
    /// Defaults to the rate stored in the checkpoint.
    pub lambda: Option<f64>,
    pub pass_threshold: f64,
    /// Defaults to the checkpoint's directory.
    pub out_dir: Option<PathBuf>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        let v = crate::config::VerifySection::default();
        VerifyOptions {
            grid_per_axis: v.grid_per_axis,
            tol: v.tol,
            lambda: None,
            pass_threshold: v.pass_threshold,
            out_dir: None,
        }
    }
}

pub struct VerifyOutcome {
    pub report: VerificationReport,
    pub report_path: PathBuf,
    pub passed: bool,
}

fn checkpoint_system(ck: &Checkpoint) -> Result<SystemModel, CliError> {
    systems::builtin(&ck.meta.system)
        .ok_or_else(|| CliError::Config(format!("checkpoint names unknown system `{}`", ck.meta.system)))
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// Grid-verifies a checkpoint and writes `verification.toml`.
pub fn cmd_verify(checkpoint_path: &Path, opts: &VerifyOptions) -> Result<VerifyOutcome, CliError> {
    let ck = load_checkpoint(checkpoint_path)?;
    let system = checkpoint_system(&ck)?;
    let lambda = opts.lambda.unwrap_or(ck.meta.lambda);
    let report = verify::verify(&system, &ck.net, lambda, opts.grid_per_axis, opts.tol)?;
    let passed = report.pass_rate() >= opts.pass_threshold;
    let dir = opts.out_dir.clone().unwrap_or_else(|| parent_dir(checkpoint_path));
    create_dir(&dir)?;
    let pre = preamble(
        &[
            ("checkpoint", format!("{:?}", checkpoint_path.display().to_string())),
            ("grid_per_axis", opts.grid_per_axis.to_string()),
            ("tol", format!("{:e}", opts.tol)),
            ("lambda", format!("{lambda:e}")),
            ("pass_threshold", opts.pass_threshold.to_string()),
            ("passed", passed.to_string()),
        ],
        None,
    );
    let report_path = dir.join("verification.toml");
    write(&report_path, &report.to_toml(&pre))?;
    Ok(VerifyOutcome {
        report,
        report_path,
        passed,
    })
}

#[derive(Debug, Clone, Default)]
pub struct SimulateOptions {
    /// Replaces the system defaults.
    pub sim: Option<SimConfig>,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

pub struct SimulateOutcome {
    pub trajectory: Trajectory,
    pub config: SimConfig,
    pub mse_percent: Option<f64>,
    pub trajectory_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Closed-loop run of a checkpoint; writes `trajectory.csv` and
/// `simulation.toml`.
pub fn cmd_simulate(checkpoint_path: &Path, opts: &SimulateOptions) -> Result<SimulateOutcome, CliError> {
    let ck = load_checkpoint(checkpoint_path)?;
    let system = checkpoint_system(&ck)?;
    let mut sim = match &opts.sim {
        Some(s) => s.clone(),
        None => SimConfig::for_system(system.name())
            .ok_or_else(|| CliError::Config(format!("no default simulation for `{}`", system.name())))?,
    };
    if let Some(sigma) = opts.noise {
        sim.noise_sigma = sigma;
    }
    if let Some(seed) = opts.seed {
        sim.noise_seed = seed;
    }
    sim.validate(system.n()).map_err(|e| CliError::Config(format!("sim: {e}")))?;
    let traj = simulate::simulate(&system, &ck.net, &sim)?;
    let mse = simulate::mse_percent(&traj, 0.0).ok();
    let dir = opts.out_dir.clone().unwrap_or_else(|| parent_dir(checkpoint_path));
    create_dir(&dir)?;
    let sim_text = toml::to_string(&sim).expect("sim config serializes");
    let pre = preamble(
        &[("checkpoint", format!("{:?}", checkpoint_path.display().to_string()))],
        Some(&sim_text),
    );
    let trajectory_path = dir.join("trajectory.csv");
    write(&trajectory_path, &traj.to_csv(&pre))?;

    let k = traj.len();
    let tail = &traj.err_norm[k - k.div_ceil(5)..];
    let mut summary = String::new();
    let _ = writeln!(summary, "samples = {k}");
    let _ = writeln!(summary, "err_norm_initial = {:e}", traj.err_norm[0]);
    let _ = writeln!(summary, "err_norm_final = {:e}", traj.err_norm[k - 1]);
    let _ = writeln!(summary, "err_norm_tail_mean = {:e}", tail.iter().sum::<f64>() / tail.len() as f64);
    match mse {
        Some(m) => {
            let _ = writeln!(summary, "mse_percent = {m:e}");
        }
        None => summary.push_str("# mse_percent undefined (zero state energy)\n"),
    }
    if let Some(d) = &traj.diagnostic {
        let _ = writeln!(summary, "diagnostic = {d:?}");
    }
    let summary_path = dir.join("simulation.toml");
    write(&summary_path, &commented(&pre, &summary))?;
    Ok(SimulateOutcome {
        trajectory: traj,
        config: sim,
        mse_percent: mse,
        trajectory_path,
        summary_path,
    })
}

/// Finite-difference Jacobian check of a built-in system.
pub fn cmd_validate_system(name: &str, samples: usize, seed: u64) -> Result<systems::ValidationReport, CliError> {
    let system = systems::builtin(name).ok_or_else(|| {
        CliError::Config(format!(
            "unknown system `{name}` (built-in: {})",
            systems::BUILTIN_SYSTEMS.join(", ")
        ))
    })?;
    Ok(systems::validate(&system, samples, seed)?)
}
