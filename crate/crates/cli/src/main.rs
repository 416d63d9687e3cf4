//! Command-line front end: dataset generation, experiment runs, bound
//! reports, and margin/gap estimation, driven by JSON configuration
//! documents with flag overrides.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use calq::bounds::{
    confidence_z, optimal_diameter_prop1, phi, solve_tilde_delta, DiameterResult, GapSpec,
    MarginSpec, RegionModel,
};
use calq::datagen::{generate, GeneratorFamily, GeneratorSpec};
use calq::dataset::Dataset;
use calq::error::Error as CalqError;
use calq::estimation::{algorithm3_loop, Algorithm3Config};
use calq::harness::{
    emit_plots, run, summarize, write_results_csv, write_summary_json, ExperimentConfig,
    GeneratorConfig, LearnerConfig,
};
use calq::loss::QuantileLevel;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(
    name = "calq",
    version,
    about = "Conformal calibration of quantile predictors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to CSV.
    Generate {
        /// Family: ml, ma, example2, example3, or linear.
        #[arg(long)]
        family: String,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Feature dimension (families with a free dimension only).
        #[arg(long)]
        d: Option<usize>,
        /// Intercept of the example2 family.
        #[arg(long)]
        theta0: Option<f64>,
    },
    /// Run an experiment described by a JSON configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the configuration's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Caps worker threads.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value_t = false)]
        quiet: bool,
    },
    /// Evaluate coverage-gap bounds described by a JSON configuration.
    Bounds {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = false)]
        quiet: bool,
    },
    /// Estimate margin/gap functions and select a pooling diameter.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the configuration's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value_t = false)]
        quiet: bool,
    },
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<CalqError> for CliError {
    fn from(e: CalqError) -> Self {
        let code = match &e {
            CalqError::Config(_) | CalqError::InvalidParameter(_) => EXIT_CONFIG,
            CalqError::Csv(_)
            | CalqError::Io(_)
            | CalqError::InsufficientData { .. }
            | CalqError::LengthMismatch { .. }
            | CalqError::DimensionMismatch { .. }
            | CalqError::NonFinite { .. } => EXIT_DATA,
            _ => EXIT_NUMERIC,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Generate {
            family,
            n,
            seed,
            out,
            d,
            theta0,
        } => cmd_generate(&family, n, seed, &out, d, theta0),
        Command::Run {
            config,
            out,
            seed,
            jobs,
            quiet,
        } => cmd_run(&config, &out, seed, jobs, quiet),
        Command::Bounds { config, out, quiet } => cmd_bounds(&config, &out, quiet),
        Command::Estimate {
            config,
            out,
            seed,
            jobs,
            quiet,
        } => cmd_estimate(&config, &out, seed, jobs, quiet),
    }
}

fn parse_family(name: &str) -> CliResult<GeneratorFamily> {
    match name {
        "ml" => Ok(GeneratorFamily::Ml),
        "ma" => Ok(GeneratorFamily::Ma),
        "example2" => Ok(GeneratorFamily::Example2),
        "example3" => Ok(GeneratorFamily::Example3),
        "linear" => Ok(GeneratorFamily::Linear),
        other => Err(CliError::config(format!(
            "unknown family `{other}`; valid: ml, ma, example2, example3, linear"
        ))),
    }
}

fn load_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        CliError::config(format!(
            "invalid configuration at `{}`: {}",
            e.path(),
            e.inner()
        ))
    })
}

fn configure_jobs(jobs: Option<usize>) -> CliResult<()> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(CliError::config("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn write_manifest(dir: &Path, manifest: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::config(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.json"), text).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("cannot write manifest: {e}"),
    })?;
    Ok(())
}

fn cmd_generate(
    family: &str,
    n: usize,
    seed: u64,
    out: &Path,
    d: Option<usize>,
    theta0: Option<f64>,
) -> CliResult<()> {
    let family = parse_family(family)?;
    let mut spec = GeneratorSpec::new(family, seed);
    if let Some(d) = d {
        spec = spec.with_dim(d);
    }
    if let Some(t0) = theta0 {
        spec.theta0 = t0;
    }
    let data = generate(&spec, n)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(CalqError::Io)?;
        }
    }
    data.to_csv(out, "demand")?;
    Ok(())
}

fn cmd_run(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    jobs: Option<usize>,
    quiet: bool,
) -> CliResult<()> {
    configure_jobs(jobs)?;
    let mut config: ExperimentConfig = load_config(config_path)?;
    if let Some(seed) = seed {
        config.master_seed = seed;
    }
    config.validate()?;
    std::fs::create_dir_all(out).map_err(CalqError::Io)?;

    let output = run(&config)?;
    let summary = summarize(&output.records);
    write_results_csv(out.join("results.csv"), &output.records)?;
    write_summary_json(out.join("summary.json"), &summary)?;
    let plots = emit_plots(out.join("plots"), config.mode, &summary)?;
    write_manifest(
        out,
        &serde_json::json!({
            "command": "run",
            "config": config,
            "master_seed": config.master_seed,
            "outputs": {
                "results": "results.csv",
                "summary": "summary.json",
                "plots": plots.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            },
        }),
    )?;

    if !quiet {
        let failures: usize = summary.cells.iter().map(|c| c.failures).sum();
        println!(
            "{} records across {} cells ({} failures) -> {}",
            output.records.len(),
            summary.cells.len(),
            failures,
            out.display()
        );
        for r in &summary.reductions {
            println!(
                "{} q={} pooling={} fraction={}: raw {:.5} -> calibrated {:.5} ({:+.1}%)",
                r.learner,
                r.quantile,
                r.pooling,
                r.fraction,
                r.raw_mean,
                r.calibrated_mean,
                -r.percent_reduction
            );
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
enum MarginConfig {
    Uniform {
        gamma_low: f64,
        gamma_high: f64,
    },
    Gaussian {
        gamma_low: f64,
        gamma_high: f64,
        alpha: f64,
    },
    Exponential {
        gamma_low: f64,
        gamma_high: f64,
        alpha: f64,
    },
    Linear {
        c1: f64,
        c2: f64,
    },
}

impl MarginConfig {
    fn build(&self) -> Result<MarginSpec, CalqError> {
        match *self {
            MarginConfig::Uniform {
                gamma_low,
                gamma_high,
            } => calq::bounds::margin_uniform(gamma_low, gamma_high),
            MarginConfig::Gaussian {
                gamma_low,
                gamma_high,
                alpha,
            } => calq::bounds::margin_gaussian(gamma_low, gamma_high, QuantileLevel::new(alpha)?),
            MarginConfig::Exponential {
                gamma_low,
                gamma_high,
                alpha,
            } => {
                calq::bounds::margin_exponential(gamma_low, gamma_high, QuantileLevel::new(alpha)?)
            }
            MarginConfig::Linear { c1, c2 } => calq::bounds::margin_linear(c1, c2),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GapConfig {
    #[serde(default)]
    c: f64,
    #[serde(default)]
    nu: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionConfig {
    rho: f64,
    n: f64,
    #[serde(default)]
    iota: f64,
    #[serde(default = "one")]
    xi_max: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum XiGridConfig {
    List(Vec<f64>),
    Range { lo: f64, hi: f64, points: usize },
}

impl XiGridConfig {
    fn values(&self) -> Vec<f64> {
        match self {
            XiGridConfig::List(v) => v.clone(),
            XiGridConfig::Range { lo, hi, points } => {
                let k = (*points).max(2);
                (0..k)
                    .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
                    .collect()
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Prop1Config {
    c1: f64,
    c2: f64,
    rho: f64,
    n: f64,
    iota: f64,
    nu: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsConfig {
    margin: MarginConfig,
    #[serde(default)]
    gap: Option<GapConfig>,
    region: RegionConfig,
    xi_grid: XiGridConfig,
    #[serde(default)]
    delta_conf: Option<f64>,
    #[serde(default)]
    prop1: Option<Prop1Config>,
}

#[derive(Serialize)]
struct BoundsCell {
    xi: f64,
    delta: Option<f64>,
    phi: Option<f64>,
    z: Option<f64>,
    lo: Option<f64>,
    hi: Option<f64>,
}

fn cmd_bounds(config_path: &Path, out: &Path, quiet: bool) -> CliResult<()> {
    let config: BoundsConfig = load_config(config_path)?;
    let margin = config.margin.build()?;
    let gap = match &config.gap {
        Some(g) => GapSpec::new(g.c, g.nu)?,
        None => GapSpec::zero(),
    };
    let region = RegionModel::new(
        config.region.rho,
        config.region.n,
        config.region.iota,
        config.region.xi_max,
    )?;
    let xi_grid = config.xi_grid.values();
    if xi_grid.is_empty() {
        return Err(CliError::config("xi_grid must not be empty"));
    }

    let mut cells = Vec::with_capacity(xi_grid.len());
    let mut best: Option<(f64, f64, f64)> = None;
    for &xi in &xi_grid {
        let solved = solve_tilde_delta(&region, xi, &margin, &gap, 1e-10).ok();
        let phi_value = solved.map(|d| phi(d, &region, xi, &margin, &gap));
        if let (Some(d), Some(p)) = (solved, phi_value) {
            if best.is_none_or(|(_, _, bp)| p < bp) {
                best = Some((xi, d, p));
            }
        }
        let z = config
            .delta_conf
            .and_then(|dc| confidence_z(dc, &region, xi, &margin, &gap).ok());
        cells.push(BoundsCell {
            xi,
            delta: solved,
            phi: phi_value,
            z,
            lo: None,
            hi: None,
        });
    }

    if best.is_none() {
        return Err(CalqError::NoFeasibleCandidate(
            "no diameter admits an equalizing margin level".into(),
        )
        .into());
    }
    let prop1 = match &config.prop1 {
        Some(p) => Some(optimal_diameter_prop1(
            p.c1, p.c2, p.rho, p.n, p.iota, p.nu,
        )?),
        None => None,
    };

    std::fs::create_dir_all(out).map_err(CalqError::Io)?;
    let report = serde_json::json!({
        "cells": cells,
        "best": best.map(|(xi, delta, phi)| serde_json::json!({
            "xi": xi, "delta": delta, "phi": phi,
        })),
        "prop1": prop1,
    });
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::config(format!("report serialization: {e}")))?;
    std::fs::write(out.join("bounds.json"), &text).map_err(CalqError::Io)?;
    write_manifest(
        out,
        &serde_json::json!({
            "command": "bounds",
            "config_path": config_path.display().to_string(),
            "config": config,
        }),
    )?;

    if !quiet {
        match best {
            Some((xi, delta, phi)) => println!(
                "best diameter {xi:.6}: delta = {delta:.6}, phi = {phi:.6} -> {}",
                out.join("bounds.json").display()
            ),
            None => println!(
                "no diameter admits an equalizing margin level -> {}",
                out.join("bounds.json").display()
            ),
        }
        if let Some(DiameterResult::FullRegion) = prop1 {
            println!("stationarity: pooling the entire region is optimal");
        }
    }
    Ok(())
}

fn default_estimate_n() -> usize {
    800
}

fn default_demand_column() -> String {
    "demand".into()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateConfig {
    #[serde(default)]
    generator: Option<GeneratorConfig>,
    #[serde(default)]
    csv_path: Option<PathBuf>,
    #[serde(default = "default_demand_column")]
    demand_column: String,
    #[serde(default = "default_estimate_n")]
    n: usize,
    #[serde(default)]
    seed: u64,
    alpha: f64,
    learner: LearnerConfig,
    #[serde(default, rename = "loop")]
    loop_config: Algorithm3Config,
    #[serde(default = "default_true")]
    standardize: bool,
}

fn cmd_estimate(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    jobs: Option<usize>,
    quiet: bool,
) -> CliResult<()> {
    configure_jobs(jobs)?;
    let mut config: EstimateConfig = load_config(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let alpha = QuantileLevel::new(config.alpha)?;
    let data = match (&config.generator, &config.csv_path) {
        (Some(g), _) => {
            let mut spec = GeneratorSpec::new(g.family, config.seed);
            if let Some(d) = g.d {
                spec = spec.with_dim(d);
            }
            spec.theta = g.theta.clone();
            if let Some(t0) = g.theta0 {
                spec.theta0 = t0;
            }
            generate(&spec, config.n)?
        }
        (None, Some(path)) => Dataset::from_csv(path, &config.demand_column, None)?,
        (None, None) => {
            return Err(CliError::config(
                "estimate requires a generator or csv_path",
            ))
        }
    };
    let data = if config.standardize {
        data.standardize()?
    } else {
        data
    };
    let learner = config.learner.build();
    let mut loop_config = config.loop_config.clone();
    loop_config.seed = config.seed;

    let outcome = algorithm3_loop(&data, alpha, learner.as_ref(), &loop_config)?;

    std::fs::create_dir_all(out).map_err(CalqError::Io)?;
    outcome.margins.write_csv(out.join("margins.csv"))?;
    outcome.kappa.write_csv(out.join("kappa.csv"))?;
    let fit = serde_json::json!({
        "xi_final": outcome.xi_final,
        "fit": outcome.kappa.fit_json(),
        "trace": outcome.trace,
    });
    let text = serde_json::to_string_pretty(&fit)
        .map_err(|e| CliError::config(format!("fit serialization: {e}")))?;
    std::fs::write(out.join("fit.json"), text).map_err(CalqError::Io)?;
    write_manifest(
        out,
        &serde_json::json!({
            "command": "estimate",
            "config": config,
            "resolved_loop": loop_config,
        }),
    )?;

    if !quiet {
        println!(
            "selected diameter {:.6} after {} round(s) -> {}",
            outcome.xi_final,
            outcome.trace.len(),
            out.display()
        );
    }
    Ok(())
}
