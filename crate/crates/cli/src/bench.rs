//! Noise-robustness sweep over contraction rates.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use contraction_observer::simulate;
use contraction_observer::Mlp;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::commands::{checkpoint_for, load_checkpoint, train_network};
use crate::config::{preamble, shipped, RunConfig};
use crate::error::CliError;

/// Named suites and the shipped configs they sweep.
pub const SUITES: &[(&str, &[&str])] = &[
    ("table2", &["vanderpol_lambda2.5", "reverse_duffing"]),
    ("table2-ci", &["vanderpol_ci", "reverse_duffing_ci"]),
];

pub fn suite_configs(name: &str) -> Result<Vec<RunConfig>, CliError> {
    let (_, members) = SUITES.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        let names: Vec<&str> = SUITES.iter().map(|(n, _)| *n).collect();
        CliError::Config(format!("unknown bench suite `{name}` (known: {})", names.join(", ")))
    })?;
    members
        .iter()
        .map(|m| RunConfig::from_toml(shipped(m).expect("suite members are shipped")))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCell {
    pub system: String,
    pub lambda: f64,
    /// One value per noise seed, in seed order.
    pub mse_percent: Vec<f64>,
    pub reference: Option<f64>,
    pub config_hash: String,
    pub cached: bool,
    /// Set when a stage failed; the statistics are then empty.
    pub failure: Option<String>,
}

impl BenchCell {
    pub fn mean(&self) -> Option<f64> {
        if self.mse_percent.is_empty() {
            return None;
        }
        Some(self.mse_percent.iter().sum::<f64>() / self.mse_percent.len() as f64)
    }

    /// Sample standard deviation over seeds.
    pub fn std(&self) -> Option<f64> {
        let m = self.mean()?;
        let k = self.mse_percent.len();
        if k < 2 {
            return Some(0.0);
        }
        let ss: f64 = self.mse_percent.iter().map(|v| (v - m).powi(2)).sum();
        Some((ss / (k - 1) as f64).sqrt())
    }

    pub fn ratio(&self) -> Option<f64> {
        Some(self.mean()? / self.reference?)
    }

    pub fn within_3x(&self) -> Option<bool> {
        self.ratio().map(|r| (1.0 / 3.0..=3.0).contains(&r))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemTrend {
    pub system: String,
    /// Means non-increasing in the rate; `None` if a cell failed.
    pub monotone: Option<bool>,
    pub all_within_3x: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchTable {
    pub cells: Vec<BenchCell>,
    pub trends: Vec<SystemTrend>,
    pub table_path: PathBuf,
    pub trend_path: PathBuf,
}

impl BenchTable {
    pub fn any_failure(&self) -> bool {
        self.cells.iter().any(|c| c.failure.is_some())
    }

    pub fn trends_hold(&self) -> bool {
        self.trends
            .iter()
            .all(|t| t.monotone == Some(true) && t.all_within_3x != Some(false))
    }
}

/// Hex sha256 of the config text with `out_dir` blanked, so the cache key
/// depends on the training inputs only.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut keyed = cfg.clone();
    keyed.out_dir = PathBuf::new();
    let digest = Sha256::digest(keyed.to_toml().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn trend(cells: &[&BenchCell]) -> (Option<bool>, Option<bool>) {
    let means: Option<Vec<f64>> = cells.iter().map(|c| c.mean()).collect();
    let monotone = means.map(|m| m.windows(2).all(|w| w[1] <= w[0]));
    let within: Option<Vec<bool>> = cells.iter().map(|c| c.within_3x()).collect();
    (monotone, within.map(|w| w.iter().all(|&b| b)))
}

fn train_or_load(cfg: &RunConfig, cache_dir: &Path, hash: &str) -> Result<(Mlp, bool), CliError> {
    let path = cache_dir.join(format!("{}_{}.toml", cfg.system.name, &hash[..16]));
    if path.exists() {
        match load_checkpoint(&path) {
            Ok(ck) => return Ok((ck.net, true)),
            Err(e) => log::warn!("ignoring unreadable cache entry: {e}"),
        }
    }
    let system = cfg.system_model()?;
    let (net, record) = train_network(&system, cfg, |_, _| Ok(()))?;
    let ck = checkpoint_for(cfg, &net, record.epochs.len(), record.final_loss);
    let text = format!("# config sha256 = {hash}\n{}", ck.to_toml());
    fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok((net, false))
}

fn run_cell(cfg: &RunConfig, cache_dir: &Path) -> BenchCell {
    let hash = config_hash(cfg);
    let mut cell = BenchCell {
        system: cfg.system.name.clone(),
        lambda: cfg.loss.lambda,
        mse_percent: Vec::new(),
        reference: None,
        config_hash: hash.clone(),
        cached: false,
        failure: None,
    };
    let result = (|| -> Result<Vec<f64>, CliError> {
        let system = cfg.system_model()?;
        let (net, cached) = train_or_load(cfg, cache_dir, &hash)?;
        cell.cached = cached;
        let bench = &cfg.bench;
        let mut base = cfg.sim().clone();
        base.xhat0 = base.x0.clone();
        base.noise_sigma = bench.noise_sigma;
        (0..bench.noise_seeds as u64)
            .into_par_iter()
            .map(|seed| {
                let mut sim = base.clone();
                sim.noise_seed = seed;
                let traj = simulate::simulate(&system, &net, &sim)?;
                if let Some(d) = &traj.diagnostic {
                    return Err(CliError::Numeric(format!("seed {seed}: {d}")));
                }
                Ok(simulate::mse_percent(&traj, bench.settle_fraction)?)
            })
            .collect()
    })();
    match result {
        Ok(v) => cell.mse_percent = v,
        Err(e) => cell.failure = Some(e.to_string()),
    }
    cell
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| format!("{x:.6e}"))
}

/// Trains (or loads cached checkpoints for) every configured rate of every
/// base config, simulates `noise_seeds` noisy runs from `x_hat(0) = x(0)`,
/// and writes `bench.csv` and `bench_trend.csv` under `out_dir`.
pub fn cmd_bench(bases: &[RunConfig], out_dir: &Path) -> Result<BenchTable, CliError> {
    let cache_dir = out_dir.join("cache");
    fs::create_dir_all(&cache_dir).map_err(|e| CliError::Io(format!("{}: {e}", cache_dir.display())))?;
    let mut cells = Vec::new();
    let mut trends = Vec::new();
    let mut config_echo = String::new();
    for base in bases {
        let system = base.system_model()?;
        let mut base = base.clone();
        base.resolve(&system)?;
        let _ = writeln!(config_echo, "[[base]]\n{}", base.to_toml());
        let start = cells.len();
        for (i, &lambda) in base.bench.lambdas.iter().enumerate() {
            let mut cfg = base.clone();
            cfg.loss.lambda = lambda;
            for w in cfg.resolve(&system)? {
                log::warn!("{}: {w}", cfg.system.name);
            }
            log::info!("bench cell {} lambda = {lambda}", cfg.system.name);
            let mut cell = run_cell(&cfg, &cache_dir);
            cell.reference = base.bench.reference.get(i).copied();
            cells.push(cell);
        }
        let group: Vec<&BenchCell> = cells[start..].iter().collect();
        let (monotone, within) = trend(&group);
        trends.push(SystemTrend {
            system: base.system.name.clone(),
            monotone,
            all_within_3x: within,
        });
    }

    let pre = preamble(&[], Some(&config_echo));
    let mut table = String::new();
    for line in pre.lines() {
        let _ = writeln!(table, "# {line}");
    }
    let _ = writeln!(
        table,
        "system,lambda,seeds,mse_percent_mean,mse_percent_std,mse_percent_min,mse_percent_max,reference,ratio,within_3x,config_sha256,status"
    );
    for c in &cells {
        let min = c.mse_percent.iter().copied().reduce(f64::min);
        let max = c.mse_percent.iter().copied().reduce(f64::max);
        let status = match &c.failure {
            Some(f) => format!("FAILED: {}", f.replace([',', '\n'], ";")),
            None => "ok".into(),
        };
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            c.system,
            c.lambda,
            c.mse_percent.len(),
            fmt_opt(c.mean()),
            fmt_opt(c.std()),
            fmt_opt(min),
            fmt_opt(max),
            c.reference.map_or_else(|| "nan".into(), |r| r.to_string()),
            fmt_opt(c.ratio()),
            c.within_3x().map_or("na", |b| if b { "yes" } else { "no" }),
            &c.config_hash[..16],
            status
        );
    }
    let table_path = out_dir.join("bench.csv");
    fs::write(&table_path, &table).map_err(|e| CliError::Io(format!("{}: {e}", table_path.display())))?;

    let mut t = String::new();
    for line in pre.lines() {
        let _ = writeln!(t, "# {line}");
    }
    let _ = writeln!(t, "system,monotone_non_increasing,all_within_3x");
    let tag = |b: Option<bool>| b.map_or("na", |b| if b { "yes" } else { "no" });
    for tr in &trends {
        let _ = writeln!(t, "{},{},{}", tr.system, tag(tr.monotone), tag(tr.all_within_3x));
    }
    let trend_path = out_dir.join("bench_trend.csv");
    fs::write(&trend_path, &t).map_err(|e| CliError::Io(format!("{}: {e}", trend_path.display())))?;

    Ok(BenchTable {
        cells,
        trends,
        table_path,
        trend_path,
    })
}
