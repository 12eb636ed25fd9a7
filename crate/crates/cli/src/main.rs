use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use observer_cli::bench;
use observer_cli::commands::{self, Overrides, SimulateOptions, VerifyOptions};
use observer_cli::config::RunConfig;
use observer_cli::error::{CliError, EXIT_OK, EXIT_THRESHOLD};

#[derive(Parser)]
#[command(name = "pinn-observer", version, about = "Neural contraction observers: train, verify, simulate, bench")]
struct Cli {
    /// Worker threads; 1 selects single-threaded, byte-reproducible mode.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample collocation points and train a gain network.
    Train {
        /// Config file, or the name of a shipped config.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Grid-check the contraction certificate of a checkpoint.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Takes grid, tolerance and pass threshold from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Integrate plant and observer from a checkpoint.
    Simulate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Takes the [sim] section from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Noise standard deviation.
        #[arg(long)]
        noise: Option<f64>,
        /// Noise seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Noise-robustness table over contraction rates.
    Bench {
        /// Suite name (table2, table2-ci); ignored when --config is given.
        #[arg(default_value = "table2")]
        suite: String,
        /// Bench a single config instead of a suite. Repeatable.
        #[arg(long)]
        config: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/bench")]
        out_dir: PathBuf,
    },
    /// Finite-difference check of a built-in system's Jacobian.
    ValidateSystem {
        name: String,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<i32, CliError> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Train {
            config,
            seed,
            out_dir,
            lambda,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            Overrides {
                seed,
                out_dir,
                lambda,
                noise: None,
                threads: cli.threads,
            }
            .apply(&mut cfg);
            let out = commands::cmd_train(cfg)?;
            println!(
                "trained {} epochs: loss {:.6e} -> {:.6e} (mpdi {:.6e}, bc {:.6e})",
                out.record.epochs.len(),
                out.record.initial_loss,
                out.record.final_loss,
                out.record.final_mpdi,
                out.record.final_bc
            );
            println!("checkpoint: {}", out.checkpoint_path.display());
            println!("history:    {}", out.history_path.display());
            Ok(EXIT_OK)
        }
        Command::Verify {
            checkpoint,
            config,
            grid,
            tol,
            lambda,
            out_dir,
        } => {
            let mut opts = VerifyOptions::default();
            if let Some(c) = config {
                let v = RunConfig::load(&c)?.verify;
                opts.grid_per_axis = v.grid_per_axis;
                opts.tol = v.tol;
                opts.pass_threshold = v.pass_threshold;
            }
            if let Some(g) = grid {
                opts.grid_per_axis = g;
            }
            if let Some(t) = tol {
                opts.tol = t;
            }
            opts.lambda = lambda;
            opts.out_dir = out_dir;
            let out = commands::cmd_verify(&checkpoint, &opts)?;
            let r = &out.report;
            println!(
                "pass_rate {:.4} ({} of {} points), worst eigenvalue {:.4e} at {:?}",
                r.pass_rate(),
                r.mpdi.passed,
                r.mpdi.points,
                r.mpdi.worst_eigenvalue,
                r.mpdi.worst_point
            );
            println!(
                "bc residual max {:.4e} mean {:.4e}; eps_bar ~ {:.4e}; L <= {:.4e}",
                r.bc_residual_max, r.bc_residual_mean, r.eps_bar_estimate, r.lipschitz_bound_l
            );
            println!("report: {}", out.report_path.display());
            if out.passed {
                Ok(EXIT_OK)
            } else {
                eprintln!("pass rate below threshold {}", opts.pass_threshold);
                Ok(EXIT_THRESHOLD)
            }
        }
        Command::Simulate {
            checkpoint,
            config,
            noise,
            seed,
            out_dir,
        } => {
            let mut opts = SimulateOptions {
                noise,
                seed,
                out_dir,
                ..Default::default()
            };
            if let Some(c) = config {
                let mut cfg = RunConfig::load(&c)?;
                let system = cfg.system_model()?;
                cfg.resolve(&system)?;
                opts.sim = cfg.sim;
            }
            let out = commands::cmd_simulate(&checkpoint, &opts)?;
            let e = &out.trajectory.err_norm;
            println!("error norm {:.4e} -> {:.4e}", e[0], e[e.len() - 1]);
            if let Some(m) = out.mse_percent {
                println!("mse_percent {m:.6e}");
            }
            if let Some(d) = &out.trajectory.diagnostic {
                eprintln!("warning: {d}");
            }
            println!("trajectory: {}", out.trajectory_path.display());
            Ok(EXIT_OK)
        }
        Command::Bench {
            suite,
            config,
            seed,
            out_dir,
        } => {
            let mut bases = if config.is_empty() {
                bench::suite_configs(&suite)?
            } else {
                config.iter().map(|c| RunConfig::load(c)).collect::<Result<Vec<_>, _>>()?
            };
            for b in &mut bases {
                Overrides {
                    seed,
                    threads: cli.threads,
                    ..Default::default()
                }
                .apply(b);
            }
            let table = bench::cmd_bench(&bases, &out_dir)?;
            for c in &table.cells {
                match (&c.failure, c.mean()) {
                    (Some(f), _) => println!("{} lambda {}: FAILED {f}", c.system, c.lambda),
                    (None, Some(m)) => println!(
                        "{} lambda {}: mse% {:.4e} +- {:.2e} (reference {})",
                        c.system,
                        c.lambda,
                        m,
                        c.std().unwrap_or(0.0),
                        c.reference.map_or_else(|| "-".into(), |r| r.to_string())
                    ),
                    (None, None) => {}
                }
            }
            for t in &table.trends {
                println!(
                    "{}: monotone {:?}, within 3x {:?}",
                    t.system, t.monotone, t.all_within_3x
                );
            }
            println!("table: {}", table.table_path.display());
            if table.any_failure() || !table.trends_hold() {
                Ok(EXIT_THRESHOLD)
            } else {
                Ok(EXIT_OK)
            }
        }
        Command::ValidateSystem { name, samples, seed } => {
            let r = commands::cmd_validate_system(&name, samples, seed)?;
            println!(
                "{}: {} samples, max relative error {:.3e} (tolerance {:.0e}), non-finite {} -> {}",
                r.system,
                r.samples,
                r.max_relative_error,
                r.tolerance,
                r.non_finite_points,
                if r.passed { "ok" } else { "FAILED" }
            );
            Ok(if r.passed { EXIT_OK } else { EXIT_THRESHOLD })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
