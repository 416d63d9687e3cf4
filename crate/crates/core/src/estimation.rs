//! Data-driven estimation of the margin and gap functions, and the
//! iterative pooling-diameter selection loop built on them.
//!
//! Margins: quantile models are fitted at the base level and at levels
//! shifted by each grid offset; the spread between the shifted and base
//! predictions, extremized over contexts, pins down where each margin
//! curve reaches each probability offset. Raw estimates are clamped,
//! isotonized, and interpolated through the origin.
//!
//! Gap: within clusters of the target diameter, models trained on nested
//! subsamples are compared against a test-side model; scaled differences
//! of per-point loss gaps over random context pairs give gap samples,
//! and a power law `C * sqrt(xi^nu / n1)` is fitted by least squares on
//! the log scale.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bounds::{two_approx_pool_search, GapSpec, MarginSpec, MonotoneCurve, RegionModel};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::{pinball_unchecked, QuantileLevel};
use crate::neighbors::{euclidean, NeighborIndex};
use crate::regressors::QuantileLearner;
use crate::rng::RngStream;

/// In-place pool-adjacent-violators smoothing to a nondecreasing sequence
/// (uniform weights, least squares).
pub fn isotonic_non_decreasing(values: &mut [f64]) {
    let n = values.len();
    if n < 2 {
        return;
    }
    // blocks of (mean, count), merged while out of order
    let mut means: Vec<f64> = Vec::with_capacity(n);
    let mut counts: Vec<usize> = Vec::with_capacity(n);
    for &v in values.iter() {
        means.push(v);
        counts.push(1);
        while means.len() >= 2 {
            let k = means.len();
            if means[k - 2] <= means[k - 1] {
                break;
            }
            let total = counts[k - 2] + counts[k - 1];
            let merged = (means[k - 2] * counts[k - 2] as f64
                + means[k - 1] * counts[k - 1] as f64)
                / total as f64;
            means.truncate(k - 1);
            counts.truncate(k - 1);
            *means.last_mut().unwrap() = merged;
            *counts.last_mut().unwrap() = total;
        }
    }
    let mut pos = 0;
    for (m, c) in means.into_iter().zip(counts) {
        for _ in 0..c {
            values[pos] = m;
            pos += 1;
        }
    }
}

/// Estimated margin curves on a probability-offset grid.
///
/// `h_upper_hat[i]` / `h_lower_hat[i]` are demand offsets at which the
/// upper / lower margin curve reaches probability offset `deltas[i]`: the
/// upper curve passes through the tightest quantile spacing observed
/// across contexts and the lower curve through the widest, so
/// h_lower <= h_upper pointwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginTable {
    pub deltas: Vec<f64>,
    pub h_upper_hat: Vec<f64>,
    pub h_lower_hat: Vec<f64>,
}

impl MarginTable {
    fn curve(offsets: &[f64], deltas: &[f64]) -> Option<MonotoneCurve> {
        // keep strictly increasing positive offsets; later duplicates win
        // (they carry the larger probability offset)
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for (&x, &y) in offsets.iter().zip(deltas) {
            if x <= 0.0 || y <= 0.0 {
                continue;
            }
            if let Some(&last) = xs.last() {
                if x <= last {
                    let k = xs.len();
                    ys[k - 1] = ys[k - 1].max(y);
                    continue;
                }
            }
            xs.push(x);
            ys.push(y);
        }
        if xs.is_empty() {
            return None;
        }
        MonotoneCurve::new(xs, ys).ok()
    }

    pub fn h_upper(&self, t: f64) -> f64 {
        Self::curve(&self.h_upper_hat, &self.deltas).map_or(0.0, |c| c.eval(t))
    }

    pub fn h_lower(&self, t: f64) -> f64 {
        Self::curve(&self.h_lower_hat, &self.deltas).map_or(0.0, |c| c.eval(t))
    }

    /// Converts to a margin specification usable by the bound calculators.
    /// Fails when every estimate is degenerate (all zero spacings).
    pub fn to_margin_spec(&self) -> Result<MarginSpec> {
        let upper = Self::curve(&self.h_upper_hat, &self.deltas);
        let lower = Self::curve(&self.h_lower_hat, &self.deltas);
        match (upper, lower) {
            (Some(u), Some(l)) => Ok(MarginSpec::from_curves(u, l)),
            _ => Err(Error::InvalidParameter(
                "degenerate margin table: no positive spacing estimates".into(),
            )),
        }
    }

    /// Writes `delta,h_upper,h_lower` rows over a dense demand-offset grid.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        writeln!(f, "delta,h_upper,h_lower")?;
        let top = self
            .h_lower_hat
            .iter()
            .chain(&self.h_upper_hat)
            .fold(0.0f64, |a, &b| a.max(b))
            .max(1e-9)
            * 1.2;
        for i in 0..=60 {
            let t = top * i as f64 / 60.0;
            writeln!(f, "{t},{},{}", self.h_upper(t), self.h_lower(t))?;
        }
        Ok(())
    }
}

const MARGIN_CLAMP_EPS: f64 = 0.0;

/// Shared core: raw extremized spacings over one or more clusters, each
/// cluster fitted with its own models.
fn margin_spacings(
    clusters: &[&Dataset],
    alpha: QuantileLevel,
    delta_grid: &[f64],
    learner: &dyn QuantileLearner,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let a = alpha.get();
    for &d in delta_grid {
        if d < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "margin offsets must be nonnegative, got {d}"
            )));
        }
        if d > 0.0 && (a + d >= 1.0 || a - d <= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "quantile level escapes (0,1): alpha = {a}, delta = {d}"
            )));
        }
    }
    let mut widest = vec![f64::NEG_INFINITY; delta_grid.len()];
    let mut tightest = vec![f64::INFINITY; delta_grid.len()];
    for cluster in clusters {
        let base = learner.fit(cluster, alpha)?;
        let base_preds = base.predict_batch(cluster)?;
        for (gi, &d) in delta_grid.iter().enumerate() {
            if d == 0.0 {
                widest[gi] = widest[gi].max(0.0);
                tightest[gi] = tightest[gi].min(0.0);
                continue;
            }
            let up_model = learner.fit(cluster, QuantileLevel::new(a + d)?)?;
            let down_model = learner.fit(cluster, QuantileLevel::new(a - d)?)?;
            for i in 0..cluster.len() {
                let x = cluster.row(i);
                let up = up_model.predict(x)? - base_preds[i];
                let down = base_preds[i] - down_model.predict(x)?;
                widest[gi] = widest[gi].max(up.max(down));
                tightest[gi] = tightest[gi].min(up.min(down));
            }
        }
    }
    Ok((widest, tightest))
}

/// Estimates the margin curves from one cluster's data: fit levels
/// alpha and alpha ± delta_i, extremize the prediction spacings over the
/// cluster's contexts, clamp at zero, isotonize, and interpolate through
/// the origin.
pub fn estimate_margins(
    cluster: &Dataset,
    alpha: QuantileLevel,
    delta_grid: &[f64],
    learner: &dyn QuantileLearner,
) -> Result<MarginTable> {
    let levels = 1 + 2 * delta_grid.len();
    if cluster.len() < 2 * levels {
        return Err(Error::InsufficientData {
            split: "margin cluster",
            n: cluster.len(),
        });
    }
    let (widest, tightest) = margin_spacings(&[cluster], alpha, delta_grid, learner)?;
    Ok(build_margin_table(delta_grid, widest, tightest))
}

fn build_margin_table(
    delta_grid: &[f64],
    mut widest: Vec<f64>,
    mut tightest: Vec<f64>,
) -> MarginTable {
    for v in widest.iter_mut().chain(tightest.iter_mut()) {
        if !v.is_finite() || *v < MARGIN_CLAMP_EPS {
            *v = 0.0;
        }
    }
    // sort the grid jointly, then enforce monotonicity
    let mut order: Vec<usize> = (0..delta_grid.len()).collect();
    order.sort_by(|&i, &j| delta_grid[i].total_cmp(&delta_grid[j]));
    let deltas: Vec<f64> = order.iter().map(|&i| delta_grid[i]).collect();
    let mut wide: Vec<f64> = order.iter().map(|&i| widest[i]).collect();
    let mut tight: Vec<f64> = order.iter().map(|&i| tightest[i]).collect();
    isotonic_non_decreasing(&mut wide);
    isotonic_non_decreasing(&mut tight);
    // the tight spacing can never exceed the wide one
    for (t, w) in tight.iter_mut().zip(&wide) {
        if *t > *w {
            *t = *w;
        }
    }
    MarginTable {
        deltas,
        h_upper_hat: tight,
        h_lower_hat: wide,
    }
}

/// One gap observation: a training size, a context distance, and the
/// scaled loss-difference bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KappaSample {
    pub n1: usize,
    pub xi: f64,
    pub kappa: f64,
}

/// Gap samples plus the calibration constant and the fitted power law.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KappaTable {
    pub samples: Vec<KappaSample>,
    pub eta: f64,
    pub fitted: Option<GapSpec>,
}

impl KappaTable {
    /// Writes `n1,xi,kappa_tilde` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        writeln!(f, "n1,xi,kappa_tilde")?;
        for s in &self.samples {
            writeln!(f, "{},{},{}", s.n1, s.xi, s.kappa)?;
        }
        Ok(())
    }

    /// The fitted `(C, nu, eta)` as a JSON record.
    pub fn fit_json(&self) -> serde_json::Value {
        match &self.fitted {
            Some(g) => serde_json::json!({ "c": g.c, "nu": g.nu, "eta": self.eta }),
            None => serde_json::json!({ "c": null, "nu": null, "eta": self.eta }),
        }
    }
}

/// Least-squares fit of `kappa = C sqrt(xi^nu / n1)` on the log scale over
/// samples with positive kappa and xi; nu is clamped at zero. Returns
/// `None` without at least two usable, distinct-distance samples.
pub fn fit_power_law(samples: &[KappaSample]) -> Option<GapSpec> {
    let points: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.kappa > 0.0 && s.xi > 0.0 && s.n1 > 0)
        .map(|s| (s.xi.ln(), s.kappa.ln() + 0.5 * (s.n1 as f64).ln()))
        .collect();
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mean_w = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_z = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sww: f64 = points.iter().map(|p| (p.0 - mean_w).powi(2)).sum();
    if sww <= 1e-12 {
        return None;
    }
    let swz: f64 = points.iter().map(|p| (p.0 - mean_w) * (p.1 - mean_z)).sum();
    let mut slope = swz / sww;
    let intercept;
    if slope < 0.0 {
        // clamped at nu = 0: refit the intercept alone
        slope = 0.0;
        intercept = mean_z;
    } else {
        intercept = mean_z - slope * mean_w;
    }
    GapSpec::new(intercept.exp(), 2.0 * slope).ok()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KappaConfig {
    /// Subsample shares of the cluster's training side.
    pub rho_grid: Vec<f64>,
    /// Share of each cluster assigned to the training side.
    pub train_share: f64,
    /// Cap on the number of random context pairs overall.
    pub max_pairs: usize,
    /// Fallback calibration constant when every per-point loss is zero.
    pub eta_override: Option<f64>,
    pub seed: u64,
    /// Clusters below this size are skipped.
    pub min_cluster: usize,
}

impl Default for KappaConfig {
    fn default() -> Self {
        Self {
            rho_grid: vec![0.4, 0.6, 0.8],
            train_share: 0.5,
            max_pairs: 10_000,
            eta_override: None,
            seed: 0,
            min_cluster: 20,
        }
    }
}

/// Deterministic Lloyd iterations at a fixed center count.
fn kmeans(coords: &[Vec<f64>], k: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let n = coords.len();
    let k = k.min(n).max(1);
    let mut centers: Vec<Vec<f64>> = rng
        .sample_indices(n, k)
        .into_iter()
        .map(|i| coords[i].clone())
        .collect();
    let mut assign = vec![0usize; n];
    for _ in 0..25 {
        let mut changed = false;
        for (i, x) in coords.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for (c, center) in centers.iter().enumerate() {
                let d = euclidean(x, center);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if assign[i] != best.1 {
                assign[i] = best.1;
                changed = true;
            }
        }
        let d = coords[0].len();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(&coords[i]) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums[c].iter_mut() {
                    *s /= counts[c] as f64;
                }
                centers[c] = sums[c].clone();
            }
        }
        if !changed {
            break;
        }
    }
    let mut clusters = vec![Vec::new(); k];
    for (i, &c) in assign.iter().enumerate() {
        clusters[c].push(i);
    }
    clusters.retain(|c| !c.is_empty());
    clusters
}

fn cluster_diameter_proxy(coords: &[Vec<f64>], cluster: &[usize]) -> f64 {
    let d = coords[0].len();
    let mut centroid = vec![0.0; d];
    for &i in cluster {
        for (c, v) in centroid.iter_mut().zip(&coords[i]) {
            *c += v;
        }
    }
    for c in centroid.iter_mut() {
        *c /= cluster.len() as f64;
    }
    let max_r = cluster
        .iter()
        .map(|&i| euclidean(&coords[i], &centroid))
        .fold(0.0f64, f64::max);
    2.0 * max_r
}

/// Seeded k-means partition with the center count chosen so the median
/// cluster diameter best matches the target.
pub fn cluster_by_diameter(
    coords: &[Vec<f64>],
    target_diameter: f64,
    rng: &mut RngStream,
) -> Vec<Vec<usize>> {
    let n = coords.len();
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    let mut k = 1usize;
    while k <= (n / 2).max(1) && k <= 64 {
        let mut stream = rng.substream(k as u64);
        let clusters = kmeans(coords, k, &mut stream);
        let mut diams: Vec<f64> = clusters
            .iter()
            .map(|c| cluster_diameter_proxy(coords, c))
            .collect();
        diams.sort_unstable_by(f64::total_cmp);
        let median = diams[diams.len() / 2];
        let gap = (median - target_diameter).abs();
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, clusters));
        }
        k *= 2;
    }
    best.map(|(_, c)| c)
        .unwrap_or_else(|| vec![(0..n).collect()])
}

/// Estimates gap samples at the target cluster diameter and fits the
/// power law. Clusters the (standardized) contexts, splits each cluster
/// into a training and a test side, trains models on nested subsamples of
/// the training side plus a reference model on the test side, and turns
/// per-point loss differences over random context pairs into gap samples.
pub fn estimate_kappa(
    dataset: &Dataset,
    alpha: QuantileLevel,
    cluster_diameter: f64,
    learner: &dyn QuantileLearner,
    config: &KappaConfig,
) -> Result<KappaTable> {
    if !(cluster_diameter > 0.0) {
        return Err(Error::InvalidParameter(
            "cluster diameter must be positive".into(),
        ));
    }
    if !(config.train_share > 0.0 && config.train_share < 1.0) {
        return Err(Error::InvalidParameter(
            "train_share must lie in (0,1)".into(),
        ));
    }
    let std = if dataset.standardization().is_some() || dataset.len() < 2 {
        dataset.clone()
    } else {
        dataset.standardize()?
    };
    let coords: Vec<Vec<f64>> = (0..std.len()).map(|i| std.row(i).to_vec()).collect();
    let mut rng = RngStream::new(config.seed, 0xCAFA);
    let clusters = cluster_by_diameter(&coords, cluster_diameter, &mut rng);

    let mut samples = Vec::new();
    let mut etas = Vec::new();
    let cells = clusters.len().max(1) * config.rho_grid.len().max(1);
    let per_cell_pairs = (config.max_pairs / cells).max(16);

    for (ci, cluster) in clusters.iter().enumerate() {
        if cluster.len() < config.min_cluster {
            continue;
        }
        let mut cluster_rng = rng.substream(ci as u64 + 1);
        let mut rows = cluster.clone();
        cluster_rng.shuffle(&mut rows);
        let split_at =
            ((rows.len() as f64 * config.train_share).floor() as usize).clamp(1, rows.len() - 1);
        let train_rows = &rows[..split_at];
        let test_rows = &rows[split_at..];
        let train_side = std.subset(train_rows)?;
        let test_side = std.subset(test_rows)?;
        let test_model = learner.fit(&test_side, alpha)?;
        let test_losses: Vec<f64> = (0..test_side.len())
            .map(|i| {
                let p = test_model.predict(test_side.row(i))?;
                Ok(pinball_unchecked(p, test_side.demand()[i], alpha.get()))
            })
            .collect::<Result<_>>()?;

        for (ri, &rho) in config.rho_grid.iter().enumerate() {
            let n1 = (train_side.len() as f64 * rho).floor() as usize;
            if n1 < 1 {
                return Err(Error::InsufficientData {
                    split: "kappa subsample",
                    n: n1,
                });
            }
            let mut sub_rng = cluster_rng.substream(ri as u64);
            let chosen = sub_rng.sample_indices(train_side.len(), n1.min(train_side.len()));
            let sub_train = train_side.subset(&chosen)?;
            let model = learner.fit(&sub_train, alpha)?;

            let mut gaps = Vec::with_capacity(test_side.len());
            let mut eta_acc = 0.0;
            let mut eta_count = 0usize;
            for i in 0..test_side.len() {
                let pred = model.predict(test_side.row(i))?;
                let loss = pinball_unchecked(pred, test_side.demand()[i], alpha.get());
                gaps.push(loss - test_losses[i]);
                if loss > 0.0 {
                    eta_acc += pred / loss;
                    eta_count += 1;
                }
            }
            let eta = if eta_count > 0 {
                (eta_acc / eta_count as f64).abs()
            } else {
                config.eta_override.ok_or(Error::EtaUndefined)?
            };
            etas.push(eta);

            let m = test_side.len();
            if m < 2 {
                continue;
            }
            for _ in 0..per_cell_pairs {
                if samples.len() >= config.max_pairs {
                    break;
                }
                let i = sub_rng.below(m);
                let mut j = sub_rng.below(m - 1);
                if j >= i {
                    j += 1;
                }
                let xi = euclidean(test_side.row(i), test_side.row(j));
                let kappa = eta * (gaps[i] - gaps[j]).abs();
                samples.push(KappaSample { n1, xi, kappa });
            }
        }
    }

    if etas.is_empty() {
        return Err(Error::InsufficientData {
            split: "kappa clusters",
            n: 0,
        });
    }
    let eta = etas.iter().sum::<f64>() / etas.len() as f64;
    let fitted = fit_power_law(&samples);
    Ok(KappaTable {
        samples,
        eta,
        fitted,
    })
}

/// Configuration of the iterative diameter-selection loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Algorithm3Config {
    pub init_xi: f64,
    pub max_rounds: usize,
    /// Relative stability threshold on successive diameters.
    pub stability_tol: f64,
    /// Probability offsets for the margin fit.
    pub delta_grid: Vec<f64>,
    pub kappa: KappaConfig,
    /// Training share of the region model entering the search.
    pub rho: f64,
    /// Margin fits need stable per-cluster models; clusters smaller than
    /// this fall back to a whole-dataset fit (the margin condition is
    /// uniform over contexts, so the global fit remains a valid
    /// estimator).
    pub margin_min_cluster: usize,
    /// Candidate diameters (in standardized coordinates).
    pub xi_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for Algorithm3Config {
    fn default() -> Self {
        Self {
            init_xi: 1.0,
            max_rounds: 5,
            stability_tol: 0.05,
            delta_grid: vec![0.05, 0.1, 0.2],
            kappa: KappaConfig::default(),
            rho: 0.75,
            margin_min_cluster: 200,
            xi_grid: (1..=12).map(|i| i as f64 / 2.0).collect(),
            seed: 0,
        }
    }
}

/// One round of the loop: the diameter in force after the round, the
/// equalizing margin level and bound value when the solve succeeded.
#[derive(Debug, Clone, Serialize)]
pub struct RoundTrace {
    pub xi: f64,
    pub tilde_delta: Option<f64>,
    pub phi: Option<f64>,
    pub failed: bool,
    /// What went wrong, for failed rounds.
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct Algorithm3Outcome {
    pub xi_final: f64,
    pub margins: MarginTable,
    pub kappa: KappaTable,
    pub trace: Vec<RoundTrace>,
}

/// Empirical region model: average neighbor counts at each candidate
/// diameter, with the density exponent fitted on the log scale.
fn empirical_region(
    coords: &[Vec<f64>],
    xi_grid: &[f64],
    rho: f64,
    rng: &mut RngStream,
) -> Result<RegionModel> {
    let n = coords.len();
    let index = NeighborIndex::build(coords)?;
    let probes = rng.sample_indices(n, n.min(50));
    let mut log_points = Vec::new();
    let mut counts = Vec::new();
    for &xi in xi_grid {
        let mut acc = 0.0;
        for &p in &probes {
            acc += index.within_radius(&coords[p], xi)?.len() as f64;
        }
        let avg = acc / probes.len() as f64;
        counts.push(avg);
        if avg >= 1.0 && xi > 0.0 {
            log_points.push((xi.ln(), avg.ln()));
        }
    }
    let xi_max = xi_grid.iter().fold(0.0f64, |a, &b| a.max(b));
    let n_at_max = counts.last().copied().unwrap_or(n as f64).max(2.0);
    let iota = if log_points.len() >= 2 {
        let m = log_points.len() as f64;
        let mw = log_points.iter().map(|p| p.0).sum::<f64>() / m;
        let mz = log_points.iter().map(|p| p.1).sum::<f64>() / m;
        let sww: f64 = log_points.iter().map(|p| (p.0 - mw).powi(2)).sum();
        let swz: f64 = log_points.iter().map(|p| (p.0 - mw) * (p.1 - mz)).sum();
        if sww > 1e-12 {
            (swz / sww).max(0.0)
        } else {
            0.0
        }
    } else {
        0.0
    };
    RegionModel::new(rho, n_at_max, iota, xi_max)
}

/// Iterates (cluster, estimate margins, estimate gap, re-solve the
/// diameter) until the diameter stabilizes, the round budget runs out, or
/// two consecutive rounds fail.
pub fn algorithm3_loop(
    dataset: &Dataset,
    alpha: QuantileLevel,
    learner: &dyn QuantileLearner,
    config: &Algorithm3Config,
) -> Result<Algorithm3Outcome> {
    if !(config.init_xi > 0.0) || config.max_rounds == 0 {
        return Err(Error::InvalidParameter(
            "need init_xi > 0 and max_rounds >= 1".into(),
        ));
    }
    if config.xi_grid.is_empty() {
        return Err(Error::InvalidParameter("empty diameter grid".into()));
    }
    let std = if dataset.standardization().is_some() {
        dataset.clone()
    } else {
        dataset.standardize()?
    };
    let coords: Vec<Vec<f64>> = (0..std.len()).map(|i| std.row(i).to_vec()).collect();
    let mut rng = RngStream::new(config.seed, 0xA1D3);
    let region = empirical_region(&coords, &config.xi_grid, config.rho, &mut rng)?;

    let min_margin_cluster = 2 * (1 + 2 * config.delta_grid.len());
    let mut xi = config.init_xi;
    let mut trace = Vec::new();
    let mut last_margins: Option<MarginTable> = None;
    let mut last_kappa: Option<KappaTable> = None;
    let mut consecutive_failures = 0usize;

    for round in 0..config.max_rounds {
        let mut round_rng = rng.substream(round as u64);
        let clusters = cluster_by_diameter(&coords, xi, &mut round_rng);
        let margin_floor = min_margin_cluster.max(config.margin_min_cluster);
        let qualifying: Vec<Dataset> = clusters
            .iter()
            .filter(|c| c.len() >= margin_floor)
            .map(|c| std.subset(c))
            .collect::<Result<_>>()?;
        let mut refs: Vec<&Dataset> = qualifying.iter().collect();
        if refs.is_empty() {
            refs.push(&std);
        }

        let round_result: Result<(f64, f64, f64, MarginTable, KappaTable)> = (|| {
            let (widest, tightest) = margin_spacings(&refs, alpha, &config.delta_grid, learner)?;
            let margins = build_margin_table(&config.delta_grid, widest, tightest);
            let margin_spec = margins.to_margin_spec()?;
            let mut kappa_config = config.kappa.clone();
            kappa_config.seed = config.seed ^ (round as u64).wrapping_mul(0x9E37);
            let kappa = estimate_kappa(&std, alpha, xi, learner, &kappa_config)?;
            let gap = kappa.fitted.ok_or_else(|| {
                Error::NoFeasibleCandidate("gap power law could not be fitted".into())
            })?;
            let found = two_approx_pool_search(&config.xi_grid, &region, &margin_spec, &gap)?;
            Ok((
                found.best_xi,
                found.best_delta,
                found.best_phi,
                margins,
                kappa,
            ))
        })();

        match round_result {
            Ok((new_xi, delta, phi_value, margins, kappa)) => {
                consecutive_failures = 0;
                last_margins = Some(margins);
                last_kappa = Some(kappa);
                trace.push(RoundTrace {
                    xi: new_xi,
                    tilde_delta: Some(delta),
                    phi: Some(phi_value),
                    failed: false,
                    error: None,
                });
                let stable = (new_xi - xi).abs() <= config.stability_tol * xi;
                xi = new_xi;
                if stable {
                    break;
                }
            }
            Err(e) => {
                consecutive_failures += 1;
                trace.push(RoundTrace {
                    xi,
                    tilde_delta: None,
                    phi: None,
                    failed: true,
                    error: Some(e.to_string()),
                });
                if consecutive_failures >= 2 {
                    break;
                }
            }
        }
    }

    let margins = last_margins.ok_or_else(|| {
        let detail = trace
            .iter()
            .filter_map(|r| r.error.as_deref())
            .next_back()
            .unwrap_or("unknown");
        Error::NoFeasibleCandidate(format!("every estimation round failed (last: {detail})"))
    })?;
    let kappa = last_kappa.unwrap();
    Ok(Algorithm3Outcome {
        xi_final: xi,
        margins,
        kappa,
        trace,
    })
}
