//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 for configuration or runtime errors (printed as
//! `error: ...` on stderr), 2 for usage errors. Every command that writes an
//! output directory also writes the effective configuration to `config.json`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adapter::AdapterConfig;
use crate::config::{RunConfig, TheoryConfig, TrajectoryConfig};
use crate::error::{Error, Result};
use crate::experiments::ExperimentRegistry;
use crate::numerics::{stream_id, RngStream};
use crate::report::{emit_reports, write_csv, OracleRow, SlopeRow};
use crate::scaling::RuleSpec;
use crate::theory::{
    fit_estimates, gradient_check_suite, init_gradient_norm_experiment, input_gradient_scaling_experiment,
    moment_scaling_experiment, random_trajectory, trajectory_residual, truncate_trajectory, MomentEstimate,
};

#[derive(Debug, Parser)]
#[command(name = "rankstab", version, about = "Rank scaling of low-rank adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Default, Clone, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Comma-separated rank list.
    #[arg(long, value_delimiter = ',')]
    ranks: Option<Vec<usize>>,
    /// Scaling rule name: lora, rslora, power or none.
    #[arg(long)]
    rule: Option<String>,
    /// Exponent for the power rule; alone it implies `--rule power`.
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the scaling factor for one rank.
    Gamma {
        #[arg(long)]
        rank: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of adapter and model gradients on random configurations.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        configs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// First-order trajectory prediction against exact SGD (oracle.csv).
    Trajectory {
        #[command(flatten)]
        common: Common,
    },
    /// Monte-Carlo moments and fitted slopes across ranks (moments.csv, slopes.csv).
    Moments {
        #[command(flatten)]
        common: Common,
    },
    /// Training rank sweep (trajectory.csv, finals.csv).
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// A named ablation: sgd-stability, init-only, lr-sweep or rule-comparison.
    Ablate {
        #[arg(long)]
        kind: String,
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

/// Runs one command line (without the program name) and returns the exit code.
pub fn run_command(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(std::iter::once("rankstab".to_string()).chain(argv.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match std::panic::catch_unwind(|| dispatch(cli.command)) {
        Ok(Ok(())) => 0,
        Ok(Err(Failure::Usage(msg))) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            2
        }
        Ok(Err(Failure::Run(e))) => {
            eprintln!("error: {e}");
            1
        }
        Err(_) => {
            eprintln!("error: internal failure");
            1
        }
    }
}

fn dispatch(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Gamma { rank, common } => {
            let spec =
                rule_override(&common, 1.0)?.ok_or_else(|| Failure::Usage("gamma needs --rule or --nu".to_string()))?;
            println!("{}", spec.resolve()?.gamma(rank)?);
            Ok(())
        }
        Command::Gradcheck { configs, common } => {
            let cfg = load_config(&common)?;
            let seed = cfg.theory.protocol.seed;
            let summary = with_threads(&common, || gradient_check_suite(configs, seed))?;
            println!(
                "configs {} adapter_max {:e} model_max {:e} relu_redraws {}",
                summary.configs, summary.adapter_max, summary.model_max, summary.redraws
            );
            const TOL: f64 = 1e-5;
            if summary.adapter_max <= TOL && summary.model_max <= TOL {
                println!("PASS (tolerance {TOL:e})");
                Ok(())
            } else {
                Err(Error::InvalidState(format!("gradient check exceeded tolerance {TOL:e}")).into())
            }
        }
        Command::Trajectory { common } => {
            let out = out_dir(&common)?;
            let cfg = load_config(&common)?;
            let ranks = common.ranks.clone().unwrap_or_else(|| vec![cfg.theory.trajectory.rank]);
            let rows = with_threads(&common, || oracle_rows(&cfg.theory.trajectory, &ranks))?;
            write_outputs(&out, &cfg, |dir| write_csv(&dir.join("oracle.csv"), &rows))
        }
        Command::Moments { common } => {
            let out = out_dir(&common)?;
            let cfg = load_config(&common)?;
            let (estimates, slopes) = with_threads(&common, || moment_suite(&cfg.theory))?;
            write_outputs(&out, &cfg, |dir| {
                write_csv(&dir.join("moments.csv"), &estimates)?;
                write_csv(&dir.join("slopes.csv"), &slopes)
            })
        }
        Command::Sweep { common } => run_driver("rank-sweep", &common),
        Command::Ablate { kind, common } => {
            if kind == "rank-sweep" || ExperimentRegistry::global().get(&kind).is_err() {
                let known: Vec<_> = ExperimentRegistry::global()
                    .names()
                    .into_iter()
                    .filter(|n| *n != "rank-sweep")
                    .collect();
                return Err(Failure::Usage(format!(
                    "unknown ablation `{kind}` (known: {})",
                    known.join(", ")
                )));
            }
            run_driver(&kind, &common)
        }
    }
}

fn run_driver(name: &str, common: &Common) -> std::result::Result<(), Failure> {
    let out = out_dir(common)?;
    let mut cfg = load_config(common)?;
    if name == "init-only" {
        cfg.experiment.init_scale = crate::adapter::InitScaleMode::InitOnlySqrt;
    }
    let driver = ExperimentRegistry::global().get(name)?;
    let output = driver.run(&cfg.experiment)?;
    write_outputs(&out, &cfg, |dir| emit_reports(&output, dir).map(|_| ()))
}

fn out_dir(common: &Common) -> std::result::Result<PathBuf, Failure> {
    common
        .out
        .clone()
        .ok_or_else(|| Failure::Usage("this command needs --out DIR".to_string()))
}

fn write_outputs(
    dir: &Path,
    cfg: &RunConfig,
    write: impl FnOnce(&Path) -> Result<()>,
) -> std::result::Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json() + "\n").map_err(|e| Error::io(&path, e))?;
    write(dir)?;
    Ok(())
}

fn with_threads<T: Send>(common: &Common, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match common.threads {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidState(e.to_string()))?
            .install(f),
        _ => f(),
    }
}

/// `--rule`, `--nu` and `--alpha` as one rule, or `None` when neither rule nor exponent is given.
fn rule_override(common: &Common, default_alpha: f64) -> Result<Option<RuleSpec>> {
    let alpha = common.alpha.unwrap_or(default_alpha);
    let spec = match (&common.rule, common.nu) {
        (None, None) => return Ok(None),
        (None, Some(nu)) => RuleSpec::power(nu, alpha),
        (Some(name), nu) => RuleSpec {
            name: name.clone(),
            alpha,
            nu,
        },
    };
    spec.resolve()?;
    Ok(Some(spec))
}

/// Loads `--config` (or the defaults) and applies flag overrides.
fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.theory.protocol.seed = seed;
        cfg.theory.trajectory.seed = seed;
        cfg.experiment.seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.experiment.threads = threads;
    }
    if let Some(ranks) = &common.ranks {
        cfg.theory.protocol.ranks = ranks.clone();
        cfg.experiment.ranks = ranks.clone();
    }
    match rule_override(common, 1.0).map_err(|e| Error::config("--rule", e.to_string()))? {
        Some(mut spec) => {
            if common.alpha.is_none() {
                spec.alpha = cfg.experiment.rules.first().map_or(1.0, |r| r.alpha);
            }
            cfg.experiment.rules = vec![spec.clone()];
            spec.alpha = common.alpha.unwrap_or(cfg.theory.trajectory.rule.alpha);
            cfg.theory.trajectory.rule = spec.clone();
            spec.alpha = common.alpha.unwrap_or(1.0);
            cfg.theory.rules = vec![spec];
        }
        None => {
            if let Some(alpha) = common.alpha {
                for r in cfg.theory.rules.iter_mut().chain(cfg.experiment.rules.iter_mut()) {
                    r.alpha = alpha;
                }
                cfg.theory.trajectory.rule.alpha = alpha;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Residuals of the first-order prediction after each step `1..=steps`, per rank.
pub fn oracle_rows(t: &TrajectoryConfig, ranks: &[usize]) -> Result<Vec<OracleRow>> {
    let rule = t.rule.resolve()?;
    let mut rows = Vec::new();
    for &rank in ranks {
        let config = AdapterConfig::new(rank, rule.clone(), 1.0 / t.d1 as f64)?;
        let mut rng = RngStream::new(t.seed, stream_id(&[rank as u64]));
        let (inp, a0) = random_trajectory(config, t.d1, t.d2, t.eta, t.steps, &mut rng)?;
        for n in 1..=t.steps {
            let prefix = truncate_trajectory(&inp, n);
            let res = trajectory_residual(&prefix, &a0)?;
            let (pred_b, _) = crate::theory::analytic_first_order_trajectory(&prefix, &a0)?;
            rows.push(OracleRow {
                step: n,
                rank,
                rule: rule.name().to_string(),
                nu: rule.exponent(),
                alpha: rule.alpha(),
                pred_b_norm: pred_b.frobenius_norm(),
                b_residual: res.b_abs,
                b_relative: res.b_rel,
                a_residual: res.a_abs,
            });
        }
    }
    Ok(rows)
}

/// Every configured rule: output moments of each order, the input-gradient
/// statistic and the at-init `B` gradient norm, each with a fitted slope.
pub fn moment_suite(t: &TheoryConfig) -> Result<(Vec<MomentEstimate>, Vec<SlopeRow>)> {
    let mut estimates = Vec::new();
    let mut slopes = Vec::new();
    for spec in &t.rules {
        let rule = spec.resolve()?;
        let protocol = crate::theory::MomentProtocol {
            ranks: t.ranks_for(rule.exponent()),
            ..t.protocol.clone()
        };
        let mut groups = Vec::new();
        for &m in &t.moments {
            groups.push(moment_scaling_experiment(&rule, &protocol, m)?);
        }
        groups.push(input_gradient_scaling_experiment(&rule, &protocol)?);
        groups.push(init_gradient_norm_experiment(&rule, &protocol)?);
        for g in groups {
            if g.len() >= 2 {
                slopes.push(SlopeRow::from_fit(&g, &fit_estimates(&g)?));
            }
            estimates.extend(g);
        }
    }
    Ok((estimates, slopes))
}
