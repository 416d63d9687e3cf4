//! Experiment orchestration: calibrated-vs-raw comparisons, pooling-size
//! and sample-size sweeps, and the bike-share study, with CSV/JSON/SVG
//! emission.
//!
//! Replications run concurrently; every replication owns a pre-assigned
//! RNG stream derived from the master seed, so results are independent of
//! worker count and of whether later replications exist at all. Each
//! replication regenerates (or re-splits) the data, trains every learner
//! once per quantile level, and evaluates the raw predictions alongside
//! locally calibrated ones for every pooling rule in the active grid.

pub mod plot;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate, CqpcOptions};
use crate::datagen::{generate, GeneratorFamily, GeneratorSpec};
use crate::dataset::{split, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::loss::{empirical_pinball, QuantileLevel};
use crate::neighbors::PoolingSpec;
use crate::regressors::{
    GbqConfig, GbqLearner, KnnqConfig, KnnqLearner, LinearQrConfig, LinearQrLearner,
    QuantileLearner,
};
use crate::rng::RngStream;

/// Feature columns of the bike-share CSV, in protocol order.
pub const BIKE_FEATURES: [&str; 12] = [
    "season",
    "yr",
    "mnth",
    "hr",
    "holiday",
    "weekday",
    "workingday",
    "weathersit",
    "temp",
    "atemp",
    "hum",
    "windspeed",
];

pub const BIKE_DEMAND: &str = "cnt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Compare,
    PoolingSweep,
    SamplesizeSweep,
    Bike,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub family: GeneratorFamily,
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    #[serde(default)]
    pub theta0: Option<f64>,
}

impl GeneratorConfig {
    fn spec(&self, seed: u64) -> GeneratorSpec {
        let mut spec = GeneratorSpec::new(self.family, seed);
        if let Some(d) = self.d {
            spec = spec.with_dim(d);
        }
        spec.theta = self.theta.clone();
        if let Some(t0) = self.theta0 {
            spec.theta0 = t0;
        }
        spec
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub calib: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.75,
            calib: 0.15,
            test: 0.10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LearnerConfig {
    LinearQr {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        config: LinearQrConfig,
    },
    Gbq {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        config: GbqConfig,
    },
    Knnq {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        config: KnnqConfig,
    },
}

impl LearnerConfig {
    pub fn name(&self) -> String {
        match self {
            LearnerConfig::LinearQr { name, .. } => {
                name.clone().unwrap_or_else(|| "linear_qr".into())
            }
            LearnerConfig::Gbq { name, .. } => name.clone().unwrap_or_else(|| "gbq".into()),
            LearnerConfig::Knnq { name, .. } => name.clone().unwrap_or_else(|| "knnq".into()),
        }
    }

    pub fn build(&self) -> Box<dyn QuantileLearner> {
        match self {
            LearnerConfig::LinearQr { config, .. } => Box::new(LinearQrLearner::new(*config)),
            LearnerConfig::Gbq { config, .. } => Box::new(GbqLearner::new(*config)),
            LearnerConfig::Knnq { config, .. } => Box::new(KnnqLearner::new(*config)),
        }
    }
}

fn default_quantiles() -> Vec<f64> {
    vec![0.25, 0.5, 0.75]
}

fn default_pooling() -> PoolingSpec {
    PoolingSpec::Count { m: 50 }
}

fn default_n() -> usize {
    2000
}

fn default_replications() -> usize {
    100
}

fn default_demand_column() -> String {
    "demand".into()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    #[serde(default)]
    pub csv_path: Option<PathBuf>,
    #[serde(default = "default_demand_column")]
    pub demand_column: String,
    /// Rows drawn per replication for generator-backed runs.
    #[serde(default = "default_n")]
    pub n: usize,
    pub learners: Vec<LearnerConfig>,
    #[serde(default = "default_quantiles")]
    pub quantiles: Vec<f64>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default = "default_pooling")]
    pub pooling: PoolingSpec,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Pooling rules evaluated per query in sweep modes.
    #[serde(default)]
    pub pooling_grid: Option<Vec<PoolingSpec>>,
    /// Data fractions for the sample-size sweep.
    #[serde(default)]
    pub fraction_grid: Option<Vec<f64>>,
    /// Standardize features before distance computations.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learners.is_empty() {
            return Err(Error::Config("at least one learner required".into()));
        }
        if self.quantiles.is_empty() {
            return Err(Error::Config("at least one quantile level required".into()));
        }
        for &q in &self.quantiles {
            QuantileLevel::new(q)?;
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        match self.mode {
            Mode::Bike => {
                if self.csv_path.is_none() {
                    return Err(Error::Config("bike mode requires csv_path".into()));
                }
            }
            Mode::PoolingSweep => {
                if self.pooling_grid.as_ref().is_none_or(|g| g.is_empty()) {
                    return Err(Error::Config(
                        "pooling_sweep mode requires a nonempty pooling_grid".into(),
                    ));
                }
            }
            Mode::SamplesizeSweep => {
                if self.fraction_grid.as_ref().is_none_or(|g| g.is_empty()) {
                    return Err(Error::Config(
                        "samplesize_sweep mode requires a nonempty fraction_grid".into(),
                    ));
                }
                for &f in self.fraction_grid.as_ref().unwrap() {
                    if !(f > 0.0 && f <= 1.0) {
                        return Err(Error::Config(format!(
                            "fractions must lie in (0,1], got {f}"
                        )));
                    }
                }
            }
            Mode::Compare => {
                if self.generator.is_none() && self.csv_path.is_none() {
                    return Err(Error::Config(
                        "compare mode requires a generator or csv_path".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Raw,
    Calibrated,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Raw => "raw",
            Variant::Calibrated => "calibrated",
        })
    }
}

/// One (cell x replication) outcome. Failed cells carry NaN loss and are
/// counted in the summary.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRecord {
    pub learner: String,
    pub quantile: f64,
    pub variant: Variant,
    pub pooling: String,
    pub fraction: f64,
    pub rep: u64,
    pub loss: f64,
    pub wall_ms: f64,
    #[serde(skip)]
    pub failed: bool,
}

/// Persisted predictions backing a record, so losses are recomputable.
#[derive(Debug, Clone)]
pub struct CellDetail {
    pub record_index: usize,
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct RunOutput {
    pub records: Vec<ResultRecord>,
    pub details: Vec<CellDetail>,
}

struct RepOutcome {
    records: Vec<ResultRecord>,
    predictions: Vec<(Vec<f64>, Vec<f64>)>, // aligned with records
}

enum BaseData {
    Generator(GeneratorConfig),
    Fixed(Dataset),
}

fn rep_seed(master: u64, rep: u64) -> u64 {
    // splitmix-style spreading of the replication id
    let mut z = master ^ rep.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 31)
}

fn run_replication(
    config: &ExperimentConfig,
    base: &BaseData,
    fractions: &[f64],
    poolings: &[PoolingSpec],
    rep: u64,
) -> RepOutcome {
    let seed = rep_seed(config.master_seed, rep);
    let mut records = Vec::new();
    let mut predictions = Vec::new();
    let full = match base {
        BaseData::Generator(g) => match generate(&g.spec(seed), config.n) {
            Ok(ds) => ds,
            Err(e) => {
                return failed_rep(config, fractions, poolings, rep, &e.to_string());
            }
        },
        BaseData::Fixed(ds) => ds.clone(),
    };

    for &fraction in fractions {
        let data = if fraction >= 1.0 {
            full.clone()
        } else {
            let k = ((full.len() as f64 * fraction).round() as usize).max(1);
            let mut stream = RngStream::new(seed, 0x5AB5);
            let mut idx = stream.sample_indices(full.len(), k.min(full.len()));
            idx.sort_unstable();
            match full.subset(&idx) {
                Ok(ds) => ds,
                Err(_) => full.clone(),
            }
        };
        let prepared = if config.standardize {
            match data.standardize() {
                Ok(ds) => ds,
                Err(_) => data.clone(),
            }
        } else {
            data.clone()
        };
        let spec = SplitSpec {
            train_fraction: config.split.train,
            calib_fraction: config.split.calib,
            test_fraction: config.split.test,
            seed,
        };
        let slices = split(&prepared, &spec).and_then(|(tr, ca, te)| {
            Ok((
                prepared.subset(&tr)?,
                prepared.subset(&ca)?,
                prepared.subset(&te)?,
            ))
        });
        let (train, calib, test) = match slices {
            Ok(t) => t,
            Err(e) => {
                let partial = failed_cells(config, fraction, poolings, rep, &e.to_string());
                records.extend(partial.0);
                predictions.extend(partial.1);
                continue;
            }
        };

        for learner_config in &config.learners {
            let learner = learner_config.build();
            let learner_name = learner_config.name();
            for &q in &config.quantiles {
                let alpha = QuantileLevel::new(q).expect("validated");
                let started = Instant::now();
                let cell = (|| -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
                    let model = learner.fit(&train, alpha)?;
                    let raw: Vec<f64> = model.predict_batch(&test)?;
                    let calibrated = calibrate(
                        model,
                        &calib,
                        alpha,
                        CqpcOptions {
                            pooling: PoolingSpec::All,
                            standardize_pooling: config.standardize,
                        },
                    )?;
                    let mut pooled = Vec::with_capacity(poolings.len());
                    for &p in poolings {
                        let preds: Result<Vec<f64>> = (0..test.len())
                            .map(|i| calibrated.predict_with(test.row(i), p))
                            .collect();
                        pooled.push(preds?);
                    }
                    Ok((raw, pooled))
                })();
                let wall_ms = started.elapsed().as_secs_f64() * 1e3;
                match cell {
                    Ok((raw, pooled)) => {
                        let raw_loss =
                            empirical_pinball(&raw, test.demand(), alpha).unwrap_or(f64::NAN);
                        records.push(ResultRecord {
                            learner: learner_name.clone(),
                            quantile: q,
                            variant: Variant::Raw,
                            pooling: "none".into(),
                            fraction,
                            rep,
                            loss: raw_loss,
                            wall_ms,
                            failed: false,
                        });
                        predictions.push((raw, test.demand().to_vec()));
                        for (&p, preds) in poolings.iter().zip(pooled) {
                            let loss =
                                empirical_pinball(&preds, test.demand(), alpha).unwrap_or(f64::NAN);
                            records.push(ResultRecord {
                                learner: learner_name.clone(),
                                quantile: q,
                                variant: Variant::Calibrated,
                                pooling: p.to_string(),
                                fraction,
                                rep,
                                loss,
                                wall_ms,
                                failed: false,
                            });
                            predictions.push((preds, test.demand().to_vec()));
                        }
                    }
                    Err(e) => {
                        let msg = e.to_string();
                        records.push(failed_record(
                            &learner_name,
                            q,
                            Variant::Raw,
                            "none",
                            fraction,
                            rep,
                            &msg,
                        ));
                        predictions.push((Vec::new(), Vec::new()));
                        for &p in poolings {
                            records.push(failed_record(
                                &learner_name,
                                q,
                                Variant::Calibrated,
                                &p.to_string(),
                                fraction,
                                rep,
                                &msg,
                            ));
                            predictions.push((Vec::new(), Vec::new()));
                        }
                    }
                }
            }
        }
    }
    RepOutcome {
        records,
        predictions,
    }
}

fn failed_record(
    learner: &str,
    quantile: f64,
    variant: Variant,
    pooling: &str,
    fraction: f64,
    rep: u64,
    _reason: &str,
) -> ResultRecord {
    ResultRecord {
        learner: learner.into(),
        quantile,
        variant,
        pooling: pooling.into(),
        fraction,
        rep,
        loss: f64::NAN,
        wall_ms: 0.0,
        failed: true,
    }
}

fn failed_cells(
    config: &ExperimentConfig,
    fraction: f64,
    poolings: &[PoolingSpec],
    rep: u64,
    reason: &str,
) -> (Vec<ResultRecord>, Vec<(Vec<f64>, Vec<f64>)>) {
    let mut records = Vec::new();
    let mut preds = Vec::new();
    for learner in &config.learners {
        for &q in &config.quantiles {
            records.push(failed_record(
                &learner.name(),
                q,
                Variant::Raw,
                "none",
                fraction,
                rep,
                reason,
            ));
            preds.push((Vec::new(), Vec::new()));
            for &p in poolings {
                records.push(failed_record(
                    &learner.name(),
                    q,
                    Variant::Calibrated,
                    &p.to_string(),
                    fraction,
                    rep,
                    reason,
                ));
                preds.push((Vec::new(), Vec::new()));
            }
        }
    }
    (records, preds)
}

fn failed_rep(
    config: &ExperimentConfig,
    fractions: &[f64],
    poolings: &[PoolingSpec],
    rep: u64,
    reason: &str,
) -> RepOutcome {
    let mut records = Vec::new();
    let mut predictions = Vec::new();
    for &fraction in fractions {
        let (r, p) = failed_cells(config, fraction, poolings, rep, reason);
        records.extend(r);
        predictions.extend(p);
    }
    RepOutcome {
        records,
        predictions,
    }
}

fn execute(
    config: &ExperimentConfig,
    base: BaseData,
    fractions: Vec<f64>,
    poolings: Vec<PoolingSpec>,
) -> Result<RunOutput> {
    config.validate()?;
    for p in &poolings {
        p.validate()?;
    }
    let outcomes: Vec<RepOutcome> = (0..config.replications as u64)
        .into_par_iter()
        .map(|rep| run_replication(config, &base, &fractions, &poolings, rep))
        .collect();

    let mut indexed: Vec<(ResultRecord, (Vec<f64>, Vec<f64>))> = Vec::new();
    for outcome in outcomes {
        for (record, preds) in outcome.records.into_iter().zip(outcome.predictions) {
            indexed.push((record, preds));
        }
    }
    indexed.sort_by(|(a, _), (b, _)| {
        (
            &a.learner,
            a.quantile.to_bits(),
            format!("{}", a.variant),
            &a.pooling,
            a.fraction.to_bits(),
            a.rep,
        )
            .cmp(&(
                &b.learner,
                b.quantile.to_bits(),
                format!("{}", b.variant),
                &b.pooling,
                b.fraction.to_bits(),
                b.rep,
            ))
    });
    let mut output = RunOutput::default();
    for (i, (record, (preds, targets))) in indexed.into_iter().enumerate() {
        output.details.push(CellDetail {
            record_index: i,
            predictions: preds,
            targets,
        });
        output.records.push(record);
    }
    Ok(output)
}

/// Raw vs calibrated at the configured pooling rule.
pub fn run_comparison(config: &ExperimentConfig) -> Result<RunOutput> {
    let base = base_data(config)?;
    execute(config, base, vec![1.0], vec![config.pooling])
}

/// Global training, local calibration at every pooling rule in the grid.
pub fn run_pooling_sweep(config: &ExperimentConfig) -> Result<RunOutput> {
    let base = base_data(config)?;
    let grid = config
        .pooling_grid
        .clone()
        .ok_or_else(|| Error::Config("pooling_sweep requires pooling_grid".into()))?;
    execute(config, base, vec![1.0], grid)
}

/// The pooling sweep repeated at each data fraction.
pub fn run_samplesize_sweep(config: &ExperimentConfig) -> Result<RunOutput> {
    let base = base_data(config)?;
    let fractions = config
        .fraction_grid
        .clone()
        .ok_or_else(|| Error::Config("samplesize_sweep requires fraction_grid".into()))?;
    let grid = config
        .pooling_grid
        .clone()
        .unwrap_or_else(|| vec![config.pooling]);
    execute(config, base, fractions, grid)
}

/// The bike-share protocol: documented feature columns, hourly demand.
pub fn run_bike(config: &ExperimentConfig) -> Result<RunOutput> {
    let path = config
        .csv_path
        .as_ref()
        .ok_or_else(|| Error::Config("bike mode requires csv_path".into()))?;
    let features: Vec<&str> = BIKE_FEATURES.to_vec();
    let data = Dataset::from_csv(path, BIKE_DEMAND, Some(&features))?;
    execute(
        config,
        BaseData::Fixed(data),
        vec![1.0],
        vec![config.pooling],
    )
}

/// Dispatches on the configured mode.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    match config.mode {
        Mode::Compare => run_comparison(config),
        Mode::PoolingSweep => run_pooling_sweep(config),
        Mode::SamplesizeSweep => run_samplesize_sweep(config),
        Mode::Bike => run_bike(config),
    }
}

fn base_data(config: &ExperimentConfig) -> Result<BaseData> {
    if let Some(g) = &config.generator {
        return Ok(BaseData::Generator(g.clone()));
    }
    if let Some(path) = &config.csv_path {
        let data = Dataset::from_csv(path, &config.demand_column, None)?;
        return Ok(BaseData::Fixed(data));
    }
    Err(Error::Config("no data source configured".into()))
}

/// Per-cell aggregate over replications.
#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub learner: String,
    pub quantile: f64,
    pub variant: Variant,
    pub pooling: String,
    pub fraction: f64,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReductionCell {
    pub learner: String,
    pub quantile: f64,
    pub pooling: String,
    pub fraction: f64,
    pub raw_mean: f64,
    pub calibrated_mean: f64,
    pub percent_reduction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub cells: Vec<CellSummary>,
    pub reductions: Vec<ReductionCell>,
}

pub fn summarize(records: &[ResultRecord]) -> Summary {
    type Key = (String, u64, String, String, u64);
    let mut groups: BTreeMap<Key, Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((
                r.learner.clone(),
                r.quantile.to_bits(),
                r.variant.to_string(),
                r.pooling.clone(),
                r.fraction.to_bits(),
            ))
            .or_default()
            .push(r);
    }
    let mut cells = Vec::new();
    for ((learner, qbits, variant, pooling, fbits), rs) in &groups {
        let ok: Vec<f64> = rs
            .iter()
            .filter(|r| !r.failed && r.loss.is_finite())
            .map(|r| r.loss)
            .collect();
        let failures = rs.len() - ok.len();
        let mean = if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().sum::<f64>() / ok.len() as f64
        };
        let std = if ok.len() < 2 {
            0.0
        } else {
            (ok.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (ok.len() - 1) as f64).sqrt()
        };
        cells.push(CellSummary {
            learner: learner.clone(),
            quantile: f64::from_bits(*qbits),
            variant: if variant == "raw" {
                Variant::Raw
            } else {
                Variant::Calibrated
            },
            pooling: pooling.clone(),
            fraction: f64::from_bits(*fbits),
            mean,
            std,
            count: ok.len(),
            failures,
        });
    }

    let mut reductions = Vec::new();
    for cell in &cells {
        if cell.variant != Variant::Calibrated {
            continue;
        }
        let raw = cells.iter().find(|c| {
            c.variant == Variant::Raw
                && c.learner == cell.learner
                && c.quantile == cell.quantile
                && c.fraction == cell.fraction
        });
        if let Some(raw) = raw {
            if raw.mean.is_finite() && raw.mean > 0.0 && cell.mean.is_finite() {
                reductions.push(ReductionCell {
                    learner: cell.learner.clone(),
                    quantile: cell.quantile,
                    pooling: cell.pooling.clone(),
                    fraction: cell.fraction,
                    raw_mean: raw.mean,
                    calibrated_mean: cell.mean,
                    percent_reduction: 100.0 * (raw.mean - cell.mean) / raw.mean,
                });
            }
        }
    }
    Summary { cells, reductions }
}

/// Writes the results CSV with the fixed header
/// `learner,quantile,variant,pooling,fraction,rep,loss,wall_ms`.
pub fn write_results_csv(path: impl AsRef<Path>, records: &[ResultRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(
        f,
        "learner,quantile,variant,pooling,fraction,rep,loss,wall_ms"
    )?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.learner, r.quantile, r.variant, r.pooling, r.fraction, r.rep, r.loss, r.wall_ms
        )?;
    }
    Ok(())
}

pub fn write_summary_json(path: impl AsRef<Path>, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
    std::fs::write(path.as_ref(), text)?;
    Ok(())
}

/// Emits sweep charts under `dir`: loss-vs-pooling lines per
/// (learner, quantile) for pooling sweeps, loss-vs-fraction lines for
/// sample-size sweeps, and grouped raw/calibrated bars per quantile for
/// comparisons. Returns the written paths.
pub fn emit_plots(dir: impl AsRef<Path>, mode: Mode, summary: &Summary) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match mode {
        Mode::PoolingSweep => {
            let mut keys: Vec<(String, f64)> = Vec::new();
            for c in &summary.cells {
                if c.variant == Variant::Calibrated
                    && !keys
                        .iter()
                        .any(|(l, q)| *l == c.learner && *q == c.quantile)
                {
                    keys.push((c.learner.clone(), c.quantile));
                }
            }
            for (learner, quantile) in keys {
                let mut cells: Vec<&CellSummary> = summary
                    .cells
                    .iter()
                    .filter(|c| {
                        c.variant == Variant::Calibrated
                            && c.learner == learner
                            && c.quantile == quantile
                            && c.mean.is_finite()
                    })
                    .collect();
                // numeric x for counts; `all` sits past the largest count
                let max_m = cells
                    .iter()
                    .filter_map(|c| parse_pooling_x(&c.pooling))
                    .fold(0.0f64, f64::max);
                let x_of = |pooling: &str| -> f64 {
                    parse_pooling_x(pooling).unwrap_or(max_m * 1.3 + 1.0)
                };
                cells.sort_by(|a, b| x_of(&a.pooling).total_cmp(&x_of(&b.pooling)));
                let points: Vec<(f64, f64)> =
                    cells.iter().map(|c| (x_of(&c.pooling), c.mean)).collect();
                let ticks: Vec<(f64, String)> = cells
                    .iter()
                    .map(|c| (x_of(&c.pooling), c.pooling.replace("m=", "")))
                    .collect();
                let path = dir.join(format!("loss_vs_pooling_{learner}_q{quantile}.svg"));
                plot::line_chart(
                    &path,
                    &format!("{learner} at quantile {quantile}"),
                    "pooling size",
                    "mean test pinball loss",
                    &[plot::Series {
                        name: "calibrated".into(),
                        points,
                    }],
                    Some(&ticks),
                )?;
                written.push(path);
            }
        }
        Mode::SamplesizeSweep => {
            let mut keys: Vec<(String, f64)> = Vec::new();
            for c in &summary.cells {
                if c.variant == Variant::Calibrated
                    && !keys
                        .iter()
                        .any(|(l, q)| *l == c.learner && *q == c.quantile)
                {
                    keys.push((c.learner.clone(), c.quantile));
                }
            }
            for (learner, quantile) in keys {
                let mut poolings: Vec<String> = Vec::new();
                for c in &summary.cells {
                    if c.variant == Variant::Calibrated
                        && c.learner == learner
                        && c.quantile == quantile
                        && !poolings.contains(&c.pooling)
                    {
                        poolings.push(c.pooling.clone());
                    }
                }
                let series: Vec<plot::Series> = poolings
                    .iter()
                    .map(|p| {
                        let mut pts: Vec<(f64, f64)> = summary
                            .cells
                            .iter()
                            .filter(|c| {
                                c.variant == Variant::Calibrated
                                    && c.learner == learner
                                    && c.quantile == quantile
                                    && c.pooling == *p
                                    && c.mean.is_finite()
                            })
                            .map(|c| (c.fraction, c.mean))
                            .collect();
                        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                        plot::Series {
                            name: p.clone(),
                            points: pts,
                        }
                    })
                    .collect();
                let path = dir.join(format!("loss_vs_fraction_{learner}_q{quantile}.svg"));
                plot::line_chart(
                    &path,
                    &format!("{learner} at quantile {quantile}"),
                    "data fraction",
                    "mean test pinball loss",
                    &series,
                    None,
                )?;
                written.push(path);
            }
        }
        Mode::Compare | Mode::Bike => {
            let mut quantiles: Vec<f64> = Vec::new();
            for c in &summary.cells {
                if !quantiles.contains(&c.quantile) {
                    quantiles.push(c.quantile);
                }
            }
            quantiles.sort_by(f64::total_cmp);
            for q in quantiles {
                let mut learners: Vec<String> = Vec::new();
                for c in &summary.cells {
                    if c.quantile == q && !learners.contains(&c.learner) {
                        learners.push(c.learner.clone());
                    }
                }
                let value = |learner: &str, variant: Variant| -> f64 {
                    summary
                        .cells
                        .iter()
                        .find(|c| c.learner == learner && c.quantile == q && c.variant == variant)
                        .map(|c| c.mean)
                        .unwrap_or(f64::NAN)
                };
                let raw: Vec<f64> = learners.iter().map(|l| value(l, Variant::Raw)).collect();
                let cal: Vec<f64> = learners
                    .iter()
                    .map(|l| value(l, Variant::Calibrated))
                    .collect();
                let path = dir.join(format!("compare_q{q}.svg"));
                plot::grouped_bars(
                    &path,
                    &format!("raw vs calibrated at quantile {q}"),
                    "mean test pinball loss",
                    &learners,
                    &[("raw".into(), raw), ("calibrated".into(), cal)],
                )?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

fn parse_pooling_x(pooling: &str) -> Option<f64> {
    pooling
        .strip_prefix("m=")
        .or_else(|| pooling.strip_prefix("xi="))
        .and_then(|v| v.parse().ok())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(mode: Mode) -> ExperimentConfig {
        ExperimentConfig {
            mode,
            generator: Some(GeneratorConfig {
                family: GeneratorFamily::Linear,
                d: Some(2),
                theta: None,
                theta0: None,
            }),
            csv_path: None,
            demand_column: "demand".into(),
            n: 300,
            learners: vec![LearnerConfig::LinearQr {
                name: None,
                config: LinearQrConfig {
                    max_iters: 600,
                    ..Default::default()
                },
            }],
            quantiles: vec![0.5],
            split: SplitConfig::default(),
            pooling: PoolingSpec::Count { m: 15 },
            replications: 3,
            master_seed: 11,
            pooling_grid: None,
            fraction_grid: None,
            standardize: true,
        }
    }

    #[test]
    fn comparison_produces_records_per_cell() {
        let config = tiny_config(Mode::Compare);
        let out = run_comparison(&config).unwrap();
        // (raw + calibrated) per (learner=1, quantile=1, rep=3)
        assert_eq!(out.records.len(), 6);
        assert!(out.records.iter().all(|r| !r.failed));
        assert!(out
            .records
            .iter()
            .all(|r| r.loss.is_finite() && r.loss >= 0.0));
    }

    #[test]
    fn deterministic_across_runs_and_replication_extension() {
        let config = tiny_config(Mode::Compare);
        let a = run_comparison(&config).unwrap();
        let b = run_comparison(&config).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.loss, y.loss);
        }
        // adding a replication leaves earlier ones untouched
        let mut more = tiny_config(Mode::Compare);
        more.replications = 4;
        let c = run_comparison(&more).unwrap();
        for rep in 0..3u64 {
            let pick = |out: &RunOutput| -> Vec<f64> {
                out.records
                    .iter()
                    .filter(|r| r.rep == rep)
                    .map(|r| r.loss)
                    .collect()
            };
            assert_eq!(pick(&a), pick(&c), "rep {rep} changed");
        }
    }

    #[test]
    fn pooling_all_cell_matches_comparison() {
        let mut sweep = tiny_config(Mode::PoolingSweep);
        sweep.pooling_grid = Some(vec![PoolingSpec::Count { m: 10 }, PoolingSpec::All]);
        let mut compare = tiny_config(Mode::Compare);
        compare.pooling = PoolingSpec::All;
        let sweep_out = run_pooling_sweep(&sweep).unwrap();
        let comp_out = run_comparison(&compare).unwrap();
        let pick = |out: &RunOutput, pooling: &str| -> Vec<f64> {
            out.records
                .iter()
                .filter(|r| r.variant == Variant::Calibrated && r.pooling == pooling)
                .map(|r| r.loss)
                .collect()
        };
        assert_eq!(pick(&sweep_out, "all"), pick(&comp_out, "all"));
    }

    #[test]
    fn fraction_one_matches_pooling_sweep() {
        let mut sweep = tiny_config(Mode::PoolingSweep);
        sweep.pooling_grid = Some(vec![PoolingSpec::Count { m: 12 }]);
        let mut sized = tiny_config(Mode::SamplesizeSweep);
        sized.fraction_grid = Some(vec![1.0]);
        sized.pooling_grid = Some(vec![PoolingSpec::Count { m: 12 }]);
        let a = run_pooling_sweep(&sweep).unwrap();
        let b = run_samplesize_sweep(&sized).unwrap();
        let losses = |out: &RunOutput| -> Vec<f64> {
            out.records
                .iter()
                .filter(|r| r.variant == Variant::Calibrated)
                .map(|r| r.loss)
                .collect()
        };
        assert_eq!(losses(&a), losses(&b));
    }

    #[test]
    fn infeasible_subsample_marks_cells() {
        let mut config = tiny_config(Mode::SamplesizeSweep);
        config.n = 40;
        config.pooling = PoolingSpec::Count { m: 5 };
        config.fraction_grid = Some(vec![0.05, 1.0]); // 2 rows cannot split
        let out = run_samplesize_sweep(&config).unwrap();
        let failed: Vec<&ResultRecord> = out.records.iter().filter(|r| r.failed).collect();
        assert!(!failed.is_empty());
        assert!(failed.iter().all(|r| r.fraction == 0.05));
        let summary = summarize(&out.records);
        let cell = summary
            .cells
            .iter()
            .find(|c| c.fraction == 0.05 && c.variant == Variant::Calibrated)
            .unwrap();
        assert!(cell.failures > 0);
    }

    #[test]
    fn losses_recomputable_from_persisted_predictions() {
        let config = tiny_config(Mode::Compare);
        let out = run_comparison(&config).unwrap();
        for detail in out.details.iter().take(100) {
            let record = &out.records[detail.record_index];
            if record.failed {
                continue;
            }
            let alpha = QuantileLevel::new(record.quantile).unwrap();
            let again = empirical_pinball(&detail.predictions, &detail.targets, alpha).unwrap();
            assert_eq!(again, record.loss);
        }
    }

    #[test]
    fn summary_reductions_present() {
        let config = tiny_config(Mode::Compare);
        let out = run_comparison(&config).unwrap();
        let summary = summarize(&out.records);
        assert_eq!(summary.reductions.len(), 1);
        let r = &summary.reductions[0];
        assert!(r.raw_mean.is_finite() && r.calibrated_mean.is_finite());
    }

    #[test]
    fn outputs_write_to_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(Mode::PoolingSweep);
        config.pooling_grid = Some(vec![PoolingSpec::Count { m: 10 }, PoolingSpec::All]);
        let out = run_pooling_sweep(&config).unwrap();
        let summary = summarize(&out.records);
        let csv_path = dir.path().join("results.csv");
        write_results_csv(&csv_path, &out.records).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("learner,quantile,variant,pooling,fraction,rep,loss,wall_ms"));
        write_summary_json(dir.path().join("summary.json"), &summary).unwrap();
        let plots = emit_plots(dir.path().join("plots"), Mode::PoolingSweep, &summary).unwrap();
        assert_eq!(plots.len(), 1); // one learner x one quantile
        assert!(plots[0].exists());
    }

    #[test]
    fn bike_protocol_runs_on_schema_compatible_csv() {
        use crate::rng::RngStream;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hour.csv");
        let mut text = String::from(
            "instant,season,yr,mnth,hr,holiday,weekday,workingday,weathersit,temp,atemp,hum,windspeed,casual,registered,cnt\n",
        );
        let mut rng = RngStream::new(3, 3);
        for i in 0..400 {
            let hr = i % 24;
            let temp = rng.uniform();
            let cnt = (50.0
                + 120.0 * temp
                + 30.0 * ((hr as f64 - 8.0) / 24.0).abs()
                + 10.0 * rng.standard_normal())
            .max(0.0)
            .round();
            text.push_str(&format!(
                "{i},{},{},{},{hr},0,{},1,1,{temp:.4},{temp:.4},{:.4},{:.4},0,0,{cnt}\n",
                1 + i % 4,
                i % 2,
                i % 12 + 1,
                i % 7,
                rng.uniform(),
                rng.uniform(),
            ));
        }
        std::fs::write(&path, text).unwrap();
        let mut config = tiny_config(Mode::Bike);
        config.csv_path = Some(path);
        config.generator = None;
        config.pooling = PoolingSpec::Count { m: 20 };
        config.replications = 2;
        let out = run_bike(&config).unwrap();
        assert_eq!(out.records.len(), 4); // raw + calibrated, two reps
        assert!(out.records.iter().all(|r| !r.failed));
        // extra columns (instant, casual, registered) are ignored
        let summary = summarize(&out.records);
        assert_eq!(summary.reductions.len(), 1);
    }

    #[test]
    fn bike_missing_columns_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bike.csv");
        std::fs::write(&path, "season,cnt\n1,10\n2,20\n").unwrap();
        let mut config = tiny_config(Mode::Bike);
        config.csv_path = Some(path);
        let err = run_bike(&config).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing feature columns"), "{msg}");
        assert!(msg.contains("yr") && msg.contains("windspeed"), "{msg}");
    }
}
