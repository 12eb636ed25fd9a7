use std::path::{Path, PathBuf};

use contraction_observer::optimize::TrainConfig;
use contraction_observer::simulate::SimConfig;
use contraction_observer::{network, systems, Activation, LossSpec, SystemModel};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Shipped configurations, addressable by name on the command line.
pub const SHIPPED: &[(&str, &str)] = &[
    ("vanderpol_lambda2.5", include_str!("../configs/vanderpol_lambda2.5.toml")),
    ("reverse_duffing", include_str!("../configs/reverse_duffing.toml")),
    ("vanderpol_ci", include_str!("../configs/vanderpol_ci.toml")),
    ("reverse_duffing_ci", include_str!("../configs/reverse_duffing_ci.toml")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub n_points: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_grid() -> usize {
    50
}
fn default_tol() -> f64 {
    1e-2
}
fn default_threshold() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_grid")]
    pub grid_per_axis: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Minimum pass rate for a zero exit code.
    #[serde(default = "default_threshold")]
    pub pass_threshold: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            grid_per_axis: default_grid(),
            tol: default_tol(),
            pass_threshold: default_threshold(),
        }
    }
}

fn default_lambdas() -> Vec<f64> {
    vec![2.5, 4.0, 5.0]
}
fn default_noise_seeds() -> usize {
    5
}
fn default_noise_sigma() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    /// Noise seeds 0..noise_seeds per rate.
    #[serde(default = "default_noise_seeds")]
    pub noise_seeds: usize,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub settle_fraction: f64,
    /// Reference values aligned with `lambdas`, if any.
    #[serde(default)]
    pub reference: Vec<f64>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            lambdas: default_lambdas(),
            noise_seeds: default_noise_seeds(),
            noise_sigma: default_noise_sigma(),
            settle_fraction: 0.0,
            reference: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub system: SystemSection,
    pub network: NetworkSection,
    pub loss: LossSpec,
    pub sampling: SamplingSection,
    pub train: TrainConfig,
    /// Filled from the system defaults when absent.
    #[serde(default)]
    pub sim: Option<SimConfig>,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub bench: BenchSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a file, or a shipped config when `path` names one.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if let Some(text) = shipped(&path.to_string_lossy()) {
            return Self::from_toml(text);
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Looks up the built-in system this config names.
    pub fn system_model(&self) -> Result<SystemModel, CliError> {
        systems::builtin(&self.system.name).ok_or_else(|| {
            CliError::Config(format!(
                "system.name: unknown system `{}` (built-in: {})",
                self.system.name,
                systems::BUILTIN_SYSTEMS.join(", ")
            ))
        })
    }

    pub fn layer_dims(&self, system: &SystemModel) -> Vec<usize> {
        network::layer_dims_for(system.n(), system.p(), &self.network.hidden)
    }

    /// Fills defaults and checks every section against `system`. Returns
    /// warnings that do not stop a run.
    pub fn resolve(&mut self, system: &SystemModel) -> Result<Vec<String>, CliError> {
        let n = system.n();
        if self.network.hidden.iter().any(|&w| w == 0) {
            return Err(CliError::Config("network.hidden: widths must be positive".into()));
        }
        if self.sampling.n_points == 0 {
            return Err(CliError::Config("sampling.n_points must be positive".into()));
        }
        let warnings = self
            .loss
            .validate(n)
            .map_err(|e| CliError::Config(format!("loss: {e}")))?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        if let Some(b) = self.train.batch_size {
            if b > self.sampling.n_points {
                return Err(CliError::Config(format!(
                    "train.batch_size: {b} exceeds sampling.n_points {}",
                    self.sampling.n_points
                )));
            }
        }
        if self.sim.is_none() {
            let sim = SimConfig::for_system(system.name()).ok_or_else(|| {
                CliError::Config(format!("sim: no defaults for system `{}`, give a [sim] section", system.name()))
            })?;
            self.sim = Some(sim);
        }
        self.sim
            .as_ref()
            .expect("filled above")
            .validate(n)
            .map_err(|e| CliError::Config(format!("sim: {e}")))?;
        if self.verify.grid_per_axis < 2 {
            return Err(CliError::Config("verify.grid_per_axis must be at least 2".into()));
        }
        if !(self.verify.tol.is_finite() && self.verify.tol >= 0.0) {
            return Err(CliError::Config("verify.tol must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.verify.pass_threshold) {
            return Err(CliError::Config("verify.pass_threshold must lie in [0, 1]".into()));
        }
        let b = &self.bench;
        if b.lambdas.is_empty() || b.lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(CliError::Config("bench.lambdas must be positive".into()));
        }
        if b.noise_seeds == 0 {
            return Err(CliError::Config("bench.noise_seeds must be positive".into()));
        }
        if !(0.0..1.0).contains(&b.settle_fraction) {
            return Err(CliError::Config("bench.settle_fraction must lie in [0, 1)".into()));
        }
        if !b.reference.is_empty() && b.reference.len() != b.lambdas.len() {
            return Err(CliError::Config("bench.reference must align with bench.lambdas".into()));
        }
        Ok(warnings)
    }

    pub fn sim(&self) -> &SimConfig {
        self.sim.as_ref().expect("config resolved")
    }

    /// Sets every training-side seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.network.seed = seed;
        self.sampling.seed = seed;
        self.train.seed = seed;
    }
}

pub fn shipped(name: &str) -> Option<&'static str> {
    let name = name.strip_suffix(".toml").unwrap_or(name);
    SHIPPED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Comment preamble embedded in every output file.
pub fn preamble(extra: &[(&str, String)], config_toml: Option<&str>) -> String {
    let mut s = format!("{} {}\n", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
    for (k, v) in extra {
        s.push_str(&format!("{k} = {v}\n"));
    }
    if let Some(c) = config_toml {
        s.push_str("resolved config:\n");
        s.push_str(c);
    }
    s
}
