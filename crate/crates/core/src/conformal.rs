//! Conformal calibration of quantile predictors.
//!
//! The pipeline: fit any quantile learner on the training slice, compute
//! signed conformity scores `s_i = y_i - qhat(x_i)` on the held-out
//! calibration slice, and correct each prediction by the conformal
//! quantile of the scores pooled around the query (globally, within a
//! ball, or over the m nearest calibration points). Fold-based selection
//! of the pooling size trains the learner exactly once.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Standardization};
use crate::error::{Error, Result};
use crate::loss::{pinball_unchecked, QuantileLevel};
use crate::neighbors::{NeighborIndex, PoolingSpec};
use crate::regressors::{QuantileLearner, QuantileModel};
use crate::rng::RngStream;

/// A conformal quantile value plus whether the rank was clamped at either
/// extreme of the score set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConformalQuantile {
    pub value: f64,
    pub clamped: bool,
}

/// The alpha(1 + 1/n)-th empirical quantile of the scores: the k-th
/// smallest with k = ceil(alpha * (n + 1)), clamping to the extremes when
/// the rank falls outside [1, n].
pub fn conformal_quantile(scores: &[f64], alpha: QuantileLevel) -> Result<ConformalQuantile> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let n = scores.len();
    let k = (alpha.get() * (n + 1) as f64).ceil() as i64;
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    if k > n as i64 {
        Ok(ConformalQuantile {
            value: sorted[n - 1],
            clamped: true,
        })
    } else if k < 1 {
        Ok(ConformalQuantile {
            value: sorted[0],
            clamped: true,
        })
    } else {
        Ok(ConformalQuantile {
            value: sorted[k as usize - 1],
            clamped: false,
        })
    }
}

/// Unconditional coverage bracket for a calibration set of size `n2`:
/// P(Y <= calibrated quantile) lies in [alpha, alpha + 1/(n2+1)].
pub fn coverage_bounds(n2: usize, alpha: QuantileLevel) -> (f64, f64) {
    (alpha.get(), alpha.get() + 1.0 / (n2 as f64 + 1.0))
}

/// Symmetric split-conformal interval from absolute residuals: the
/// reference construction contrasted against the one-sided newsvendor
/// correction. Returns `prediction ± q` where q is the
/// (1-alpha)(1+1/n)-th empirical quantile of the residuals.
pub fn reference_interval(
    prediction: f64,
    abs_residuals: &[f64],
    alpha: QuantileLevel,
) -> Result<(f64, f64)> {
    let level = QuantileLevel::new(1.0 - alpha.get())?;
    let q = conformal_quantile(abs_residuals, level)?;
    Ok((prediction - q.value, prediction + q.value))
}

/// Signed calibration residuals and the rows they came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConformityScores {
    pub scores: Vec<f64>,
    pub source_indices: Vec<usize>,
}

/// Options controlling score pooling at prediction time.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CqpcOptions {
    pub pooling: PoolingSpec,
    /// Standardize calibration features before measuring distances. Has no
    /// effect when the dataset is already standardized. Defaults to true.
    pub standardize_pooling: bool,
}

impl Default for CqpcOptions {
    fn default() -> Self {
        Self {
            pooling: PoolingSpec::All,
            standardize_pooling: true,
        }
    }
}

/// A base quantile model plus calibration state.
pub struct CalibratedModel {
    base: Box<dyn QuantileModel>,
    alpha: QuantileLevel,
    scores: ConformityScores,
    index: NeighborIndex,
    /// Maps incoming queries into pooling coordinates; `None` when queries
    /// already arrive in the stored coordinate system.
    pool_transform: Option<Standardization>,
    pooling: PoolingSpec,
    global: ConformalQuantile,
}

/// Fits the learner on the training slice, scores the calibration slice,
/// and returns the globally calibrated model (pooling = all).
pub fn cqpc_fit(
    train: &Dataset,
    calib: &Dataset,
    alpha: QuantileLevel,
    learner: &dyn QuantileLearner,
) -> Result<CalibratedModel> {
    cqpc_fit_with(train, calib, alpha, learner, CqpcOptions::default())
}

/// As [`cqpc_fit`], with explicit pooling options.
pub fn cqpc_fit_with(
    train: &Dataset,
    calib: &Dataset,
    alpha: QuantileLevel,
    learner: &dyn QuantileLearner,
    options: CqpcOptions,
) -> Result<CalibratedModel> {
    options.pooling.validate()?;
    let model = learner.fit(train, alpha)?;
    calibrate(model, calib, alpha, options)
}

/// Calibrates an already fitted model on the calibration slice.
pub fn calibrate(
    base: Box<dyn QuantileModel>,
    calib: &Dataset,
    alpha: QuantileLevel,
    options: CqpcOptions,
) -> Result<CalibratedModel> {
    options.pooling.validate()?;
    if calib.is_empty() {
        return Err(Error::InsufficientData {
            split: "calibration",
            n: 0,
        });
    }
    let mut scores = Vec::with_capacity(calib.len());
    for i in 0..calib.len() {
        scores.push(calib.demand()[i] - base.predict(calib.row(i))?);
    }
    let (coords, pool_transform) = pooling_coordinates(calib, options.standardize_pooling)?;
    let global = conformal_quantile(&scores, alpha)?;
    Ok(CalibratedModel {
        base,
        alpha,
        scores: ConformityScores {
            scores,
            source_indices: (0..calib.len()).collect(),
        },
        index: NeighborIndex::build(&coords)?,
        pool_transform,
        pooling: options.pooling,
        global,
    })
}

fn pooling_coordinates(
    calib: &Dataset,
    standardize: bool,
) -> Result<(Vec<Vec<f64>>, Option<Standardization>)> {
    let n = calib.len();
    if standardize && calib.standardization().is_none() && n >= 2 {
        let std = calib.standardize()?;
        let rows = (0..n).map(|i| std.row(i).to_vec()).collect();
        Ok((rows, std.standardization().cloned()))
    } else {
        let rows = (0..n).map(|i| calib.row(i).to_vec()).collect();
        Ok((rows, None))
    }
}

impl CalibratedModel {
    pub fn alpha(&self) -> QuantileLevel {
        self.alpha
    }

    pub fn scores(&self) -> &ConformityScores {
        &self.scores
    }

    pub fn pooling(&self) -> PoolingSpec {
        self.pooling
    }

    /// Returns the same model with a different pooling rule.
    pub fn with_pooling(mut self, pooling: PoolingSpec) -> Result<Self> {
        pooling.validate()?;
        self.pooling = pooling;
        Ok(self)
    }

    /// The uncorrected base prediction.
    pub fn predict_raw(&self, x: &[f64]) -> Result<f64> {
        self.base.predict(x)
    }

    /// The conformal correction pooled around `x` per the active rule.
    pub fn correction_at(&self, x: &[f64]) -> Result<ConformalQuantile> {
        self.correction_with(x, self.pooling)
    }

    /// The conformal correction under an explicit pooling rule, leaving
    /// the model's own rule untouched. Lets one calibration back a whole
    /// pooling sweep.
    pub fn correction_with(&self, x: &[f64], pooling: PoolingSpec) -> Result<ConformalQuantile> {
        match pooling {
            PoolingSpec::All => Ok(self.global),
            PoolingSpec::Count { m } => {
                if m > self.scores.scores.len() {
                    return Err(Error::PoolingCountTooLarge {
                        m,
                        available: self.scores.scores.len(),
                    });
                }
                let neighbors = self.index.k_nearest(&self.pool_coords(x), m)?;
                let pooled: Vec<f64> = neighbors.iter().map(|&i| self.scores.scores[i]).collect();
                conformal_quantile(&pooled, self.alpha)
            }
            PoolingSpec::Radius { xi } => {
                let neighbors = self.index.within_radius(&self.pool_coords(x), xi)?;
                if neighbors.is_empty() {
                    return Err(Error::EmptyPoolingRegion { xi });
                }
                let pooled: Vec<f64> = neighbors.iter().map(|&i| self.scores.scores[i]).collect();
                conformal_quantile(&pooled, self.alpha)
            }
        }
    }

    /// The calibrated prediction: base plus the pooled conformal correction.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.base.predict(x)? + self.correction_at(x)?.value)
    }

    /// The calibrated prediction under an explicit pooling rule.
    pub fn predict_with(&self, x: &[f64], pooling: PoolingSpec) -> Result<f64> {
        Ok(self.base.predict(x)? + self.correction_with(x, pooling)?.value)
    }

    fn pool_coords(&self, x: &[f64]) -> Vec<f64> {
        match &self.pool_transform {
            Some(tr) if tr.dim() == x.len() => tr.apply(x),
            _ => x.to_vec(),
        }
    }
}

/// One pooling candidate's cross-validated outcome.
#[derive(Debug, Clone, Serialize)]
pub struct GtlcCandidate {
    pub spec: PoolingSpec,
    pub mean_loss: Option<f64>,
    pub feasible: bool,
}

/// The selected pooling rule plus the full per-candidate table.
#[derive(Debug, Clone, Serialize)]
pub struct GtlcSelection {
    pub best: PoolingSpec,
    pub table: Vec<GtlcCandidate>,
}

#[derive(Debug, Clone, Copy)]
pub struct GtlcOptions {
    pub folds: usize,
    pub seed: u64,
    pub standardize_pooling: bool,
}

impl Default for GtlcOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            standardize_pooling: true,
        }
    }
}

/// Global training with local calibration: fit once on the training slice,
/// then K-fold cross-validate the pooling candidates on the calibration
/// slice. Every fold serves as validation once; each validation point is
/// calibrated using only the remaining folds' scores pooled per candidate.
/// Ties prefer tighter pooling, then earlier list order.
pub fn gtlc_select(
    train: &Dataset,
    calib: &Dataset,
    alpha: QuantileLevel,
    learner: &dyn QuantileLearner,
    candidates: &[PoolingSpec],
    options: GtlcOptions,
) -> Result<GtlcSelection> {
    if options.folds < 2 {
        return Err(Error::InvalidParameter("folds must be >= 2".into()));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidParameter(
            "at least one pooling candidate required".into(),
        ));
    }
    for c in candidates {
        c.validate()?;
    }
    let n2 = calib.len();
    if n2 < options.folds {
        return Err(Error::InsufficientData {
            split: "calibration",
            n: n2,
        });
    }

    let model = learner.fit(train, alpha)?;
    let mut scores = Vec::with_capacity(n2);
    for i in 0..n2 {
        scores.push(calib.demand()[i] - model.predict(calib.row(i))?);
    }
    let (coords, transform) = pooling_coordinates(calib, options.standardize_pooling)?;
    let _ = transform; // coordinates are already mapped

    // contiguous fold blocks over a seeded shuffle
    let perm = RngStream::new(options.seed, 0xF01D).permutation(n2);
    let fold_of = |pos: usize| pos * options.folds / n2;

    let mut sums = vec![0.0; candidates.len()];
    let mut counts = vec![0usize; candidates.len()];
    let mut feasible = vec![true; candidates.len()];

    for fold in 0..options.folds {
        let mut held_out = Vec::new();
        let mut pool_rows = Vec::new();
        for (pos, &row) in perm.iter().enumerate() {
            if fold_of(pos) == fold {
                held_out.push(row);
            } else {
                pool_rows.push(row);
            }
        }
        if held_out.is_empty() || pool_rows.is_empty() {
            continue;
        }
        let pool_coords: Vec<Vec<f64>> = pool_rows.iter().map(|&r| coords[r].clone()).collect();
        let pool_scores: Vec<f64> = pool_rows.iter().map(|&r| scores[r]).collect();
        let index = NeighborIndex::build(&pool_coords)?;

        for (ci, cand) in candidates.iter().enumerate() {
            if !feasible[ci] {
                continue;
            }
            for &row in &held_out {
                let query = &coords[row];
                let pooled: Vec<f64> = match *cand {
                    PoolingSpec::All => pool_scores.clone(),
                    PoolingSpec::Count { m } => {
                        if m > pool_scores.len() {
                            feasible[ci] = false;
                            break;
                        }
                        index
                            .k_nearest(query, m)?
                            .into_iter()
                            .map(|i| pool_scores[i])
                            .collect()
                    }
                    PoolingSpec::Radius { xi } => {
                        let hits = index.within_radius(query, xi)?;
                        if hits.is_empty() {
                            feasible[ci] = false;
                            break;
                        }
                        hits.into_iter().map(|i| pool_scores[i]).collect()
                    }
                };
                let correction = conformal_quantile(&pooled, alpha)?;
                let raw = model.predict(calib.row(row))?;
                let loss =
                    pinball_unchecked(raw + correction.value, calib.demand()[row], alpha.get());
                sums[ci] += loss;
                counts[ci] += 1;
            }
        }
    }

    let table: Vec<GtlcCandidate> = candidates
        .iter()
        .enumerate()
        .map(|(ci, &spec)| GtlcCandidate {
            spec,
            mean_loss: (feasible[ci] && counts[ci] > 0).then(|| sums[ci] / counts[ci] as f64),
            feasible: feasible[ci] && counts[ci] > 0,
        })
        .collect();

    let mut best: Option<usize> = None;
    for (ci, cand) in table.iter().enumerate() {
        let Some(loss) = cand.mean_loss else { continue };
        let better = match best {
            None => true,
            Some(bi) => {
                let best_loss = table[bi].mean_loss.unwrap();
                loss < best_loss
                    || (loss == best_loss && cand.spec.tightness() < table[bi].spec.tightness())
            }
        };
        if better {
            best = Some(ci);
        }
    }
    let best = best.ok_or_else(|| {
        Error::NoFeasibleCandidate("every pooling candidate was infeasible on some fold".into())
    })?;
    Ok(GtlcSelection {
        best: table[best].spec,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::empirical_pinball;
    use crate::regressors::{FnLearner, FnModel, LinearQrConfig, LinearQrLearner};
    use crate::rng::RngStream;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn ql(a: f64) -> QuantileLevel {
        QuantileLevel::new(a).unwrap()
    }

    fn dataset(rows: Vec<Vec<f64>>, ys: Vec<f64>) -> Dataset {
        let d = rows[0].len();
        let names = (0..d).map(|j| format!("x{j}")).collect();
        Dataset::from_rows(rows, ys, names).unwrap()
    }

    /// Independent sorted-index oracle used by the conformal quantile tests.
    fn oracle_conformal(scores: &[f64], alpha: f64) -> (f64, bool) {
        let mut s = scores.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let raw_rank = (alpha * (s.len() as f64 + 1.0)).ceil();
        if raw_rank as i64 > s.len() as i64 {
            (*s.last().unwrap(), true)
        } else if (raw_rank as i64) < 1 {
            (s[0], true)
        } else {
            (s[raw_rank as usize - 1], false)
        }
    }

    #[test]
    fn conformal_quantile_hand_cases() {
        let q = conformal_quantile(&[-3.0, -1.0, 2.0, 5.0], ql(0.5)).unwrap();
        assert_eq!((q.value, q.clamped), (2.0, false)); // k = ceil(2.5) = 3
        let q = conformal_quantile(&[0.5], ql(0.5)).unwrap();
        assert_eq!((q.value, q.clamped), (0.5, false)); // k = 1
        let q = conformal_quantile(&[1.0, 2.0, 3.0, 4.0], ql(0.99)).unwrap();
        assert_eq!((q.value, q.clamped), (4.0, true)); // k = 5 > 4
        assert!(conformal_quantile(&[], ql(0.5)).is_err());
    }

    #[test]
    fn conformal_quantile_matches_oracle() {
        let mut rng = RngStream::new(555, 0);
        for _ in 0..500 {
            let n = 1 + rng.below(60);
            let scores: Vec<f64> = (0..n).map(|_| rng.uniform_in(-20.0, 20.0)).collect();
            let alpha = 0.01 + 0.98 * rng.uniform();
            let got = conformal_quantile(&scores, ql(alpha)).unwrap();
            let (v, c) = oracle_conformal(&scores, alpha);
            assert_eq!((got.value, got.clamped), (v, c));
        }
    }

    #[test]
    fn conformal_quantile_monotone_in_alpha() {
        let mut rng = RngStream::new(77, 1);
        let scores: Vec<f64> = (0..37).map(|_| rng.standard_normal()).collect();
        let mut prev = f64::NEG_INFINITY;
        for step in 1..99 {
            let q = conformal_quantile(&scores, ql(step as f64 / 100.0)).unwrap();
            assert!(q.value >= prev);
            prev = q.value;
        }
    }

    #[test]
    fn coverage_bounds_formula() {
        let (lo, hi) = coverage_bounds(99, ql(0.5));
        assert!((lo - 0.5).abs() < 1e-15 && (hi - 0.51).abs() < 1e-15);
        let (lo, hi) = coverage_bounds(1, ql(0.25));
        assert!((lo - 0.25).abs() < 1e-15 && (hi - 0.75).abs() < 1e-15);
        let (lo, hi) = coverage_bounds(1_000_000, ql(0.5));
        assert!(hi - lo < 1.1e-6);
    }

    #[test]
    fn reference_interval_hand_case() {
        // residuals [1,2,3,4], alpha = 0.5 -> k = ceil(0.5*5) = 3 -> width 3
        let (lo, hi) = reference_interval(10.0, &[1.0, 2.0, 3.0, 4.0], ql(0.5)).unwrap();
        assert_eq!((lo, hi), (7.0, 13.0));
        // alpha -> 0 clamps at the maximum residual
        let (lo, hi) = reference_interval(0.0, &[1.0, 2.0, 3.0], ql(0.001)).unwrap();
        assert_eq!((lo, hi), (-3.0, 3.0));
    }

    #[test]
    fn reference_interval_coverage() {
        // i.i.d. draws with a fixed predictor: P(Y in C) >= 1 - alpha
        let mut rng = RngStream::new(31337, 0);
        let alpha = 0.2;
        let mut covered = 0;
        let trials = 800;
        for _ in 0..trials {
            let residuals: Vec<f64> = (0..60).map(|_| rng.standard_normal().abs()).collect();
            let y = rng.standard_normal();
            let (lo, hi) = reference_interval(0.0, &residuals, ql(alpha)).unwrap();
            if y >= lo && y <= hi {
                covered += 1;
            }
        }
        let rate = covered as f64 / trials as f64;
        let sigma = (alpha * (1.0 - alpha) / trials as f64).sqrt();
        assert!(rate >= 1.0 - alpha - 3.0 * sigma, "coverage {rate}");
    }

    fn linear_data(rng: &mut RngStream, n: usize) -> Dataset {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.uniform_in(-2.0, 2.0), rng.uniform_in(-2.0, 2.0)])
            .collect();
        let ys: Vec<f64> = rows
            .iter()
            .map(|r| 2.0 * r[0] - r[1] + rng.standard_normal())
            .collect();
        dataset(rows, ys)
    }

    #[test]
    fn constant_bias_cancels_exactly() {
        let mut rng = RngStream::new(404, 0);
        let train = linear_data(&mut rng, 150);
        let calib = linear_data(&mut rng, 80);
        let alpha = ql(0.5);
        let learner = LinearQrLearner::new(LinearQrConfig::default());
        let plain = cqpc_fit(&train, &calib, alpha, &learner).unwrap();
        for bias in [-10.0, 3.7] {
            let base = learner.fit(&train, alpha).unwrap();
            let biased = Box::new(crate::regressors::OffsetModel {
                inner: FnModelFromBox(base),
                offset: bias,
            });
            let shifted = calibrate(biased, &calib, alpha, CqpcOptions::default()).unwrap();
            for _ in 0..50 {
                let x = [rng.uniform_in(-2.0, 2.0), rng.uniform_in(-2.0, 2.0)];
                let a = plain.predict(&x).unwrap();
                let b = shifted.predict(&x).unwrap();
                assert!((a - b).abs() <= 1e-10, "bias {bias}: {a} vs {b}");
            }
        }
    }

    /// Adapter so a boxed model can live inside OffsetModel.
    struct FnModelFromBox(Box<dyn QuantileModel>);
    impl QuantileModel for FnModelFromBox {
        fn alpha(&self) -> QuantileLevel {
            self.0.alpha()
        }
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn predict(&self, x: &[f64]) -> Result<f64> {
            self.0.predict(x)
        }
    }

    #[test]
    fn single_score_correction() {
        let train = dataset(vec![vec![0.0], vec![1.0]], vec![0.0, 1.0]);
        let calib = dataset(vec![vec![0.5]], vec![4.0]);
        let alpha = ql(0.4); // k = ceil(0.4 * 2) = 1
        let learner = FnLearner::new("zero", |_t: &Dataset, a| {
            Ok(Box::new(FnModel::new(a, 1, |_| 0.0)) as Box<dyn QuantileModel>)
        });
        let model = cqpc_fit(&train, &calib, alpha, &learner).unwrap();
        assert_eq!(model.predict(&[9.0]).unwrap(), 4.0);
    }

    #[test]
    fn global_pooling_is_constant_shift() {
        let mut rng = RngStream::new(7, 3);
        let train = linear_data(&mut rng, 100);
        let calib = linear_data(&mut rng, 60);
        let model = cqpc_fit(
            &train,
            &calib,
            ql(0.3),
            &LinearQrLearner::new(LinearQrConfig::default()),
        )
        .unwrap();
        let mut shift = None;
        for _ in 0..20 {
            let x = [rng.uniform_in(-2.0, 2.0), rng.uniform_in(-2.0, 2.0)];
            let diff = model.predict(&x).unwrap() - model.predict_raw(&x).unwrap();
            match shift {
                None => shift = Some(diff),
                Some(s) => assert!((diff - s).abs() < 1e-12),
            }
        }
    }

    #[test]
    fn count_all_equals_global() {
        let mut rng = RngStream::new(8, 2);
        let train = linear_data(&mut rng, 100);
        let calib = linear_data(&mut rng, 50);
        let learner = LinearQrLearner::new(LinearQrConfig::default());
        let all = cqpc_fit(&train, &calib, ql(0.6), &learner).unwrap();
        let counted = cqpc_fit_with(
            &train,
            &calib,
            ql(0.6),
            &learner,
            CqpcOptions {
                pooling: PoolingSpec::Count { m: 50 },
                standardize_pooling: true,
            },
        )
        .unwrap();
        for _ in 0..20 {
            let x = [rng.uniform_in(-2.0, 2.0), rng.uniform_in(-2.0, 2.0)];
            assert_eq!(all.predict(&x).unwrap(), counted.predict(&x).unwrap());
        }
    }

    #[test]
    fn pooling_errors() {
        let mut rng = RngStream::new(9, 9);
        let train = linear_data(&mut rng, 40);
        let calib = linear_data(&mut rng, 20);
        let learner = LinearQrLearner::new(LinearQrConfig::default());
        let model = cqpc_fit_with(
            &train,
            &calib,
            ql(0.5),
            &learner,
            CqpcOptions {
                pooling: PoolingSpec::Count { m: 21 },
                standardize_pooling: true,
            },
        )
        .unwrap();
        match model.predict(&[0.0, 0.0]) {
            Err(Error::PoolingCountTooLarge {
                m: 21,
                available: 20,
            }) => {}
            other => panic!("expected count error, got {other:?}"),
        }
        let model = model
            .with_pooling(PoolingSpec::Radius { xi: 1e-9 })
            .unwrap();
        match model.predict(&[50.0, 50.0]) {
            Err(Error::EmptyPoolingRegion { .. }) => {}
            other => panic!("expected empty region error, got {other:?}"),
        }
    }

    /// Oracle with a context-independent error against uniform noise: the
    /// correction must land within the order-statistic spacing around the
    /// noise quantile.
    #[test]
    fn well_specified_correction_is_small() {
        let mut rng = RngStream::new(606, 0);
        let alpha = 0.5;
        let n2 = 2000;
        let rows: Vec<Vec<f64>> = (0..n2).map(|_| vec![rng.uniform()]).collect();
        // y = 3x + u, u uniform on [-1, 1]; the conditional median is 3x
        let ys: Vec<f64> = rows
            .iter()
            .map(|r| 3.0 * r[0] + rng.uniform_in(-1.0, 1.0))
            .collect();
        let calib = dataset(rows, ys);
        let train = calib.subset(&[0, 1]).unwrap();
        let learner = FnLearner::new("oracle", |_t: &Dataset, a| {
            Ok(Box::new(FnModel::new(a, 1, |x| 3.0 * x[0])) as Box<dyn QuantileModel>)
        });
        let model = cqpc_fit(&train, &calib, ql(alpha), &learner).unwrap();
        let q = model.correction_at(&[0.5]).unwrap();
        // order statistics around the alpha rank
        let mut sorted = model.scores().scores.clone();
        sorted.sort_unstable_by(f64::total_cmp);
        let k = (alpha * (n2 as f64 + 1.0)).ceil() as usize;
        let w = (3.0 * (alpha * (1.0 - alpha) * n2 as f64).sqrt()).ceil() as usize;
        let lo = sorted[k.saturating_sub(w + 1)];
        let hi = sorted[(k + w).min(n2 - 1)];
        assert!(lo <= 0.0 && 0.0 <= hi, "window [{lo}, {hi}] misses 0");
        assert!(
            q.value.abs() <= (hi - lo),
            "correction {} too large",
            q.value
        );
    }

    /// The local-pooling payoff on region-dependent bias: true quantile has
    /// slope 2 right of zero and 4 left of zero, the base model uses slope
    /// 3, so local pooling must beat the global correction.
    #[test]
    fn local_pooling_beats_global_under_regional_bias() {
        let rng = RngStream::new(2025, 0);
        let alpha = ql(0.5);
        let mut local_wins = 0;
        let seeds = 20;
        for seed in 0..seeds {
            let mut gen = rng.substream(seed);
            let make = |gen: &mut RngStream, n: usize| {
                let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![gen.uniform_in(-4.0, 4.0)]).collect();
                let ys: Vec<f64> = rows
                    .iter()
                    .map(|r| {
                        let q = if r[0] > 0.0 {
                            2.0 * r[0] + 2.0
                        } else {
                            -4.0 * r[0] + 2.0
                        };
                        q + gen.standard_normal()
                    })
                    .collect();
                dataset(rows, ys)
            };
            let calib = make(&mut gen, 300);
            let test = make(&mut gen, 200);
            let learner = FnLearner::new("misspecified", |_t: &Dataset, a| {
                Ok(Box::new(FnModel::new(a, 1, |x| 3.0 * x[0].abs() + 2.0))
                    as Box<dyn QuantileModel>)
            });
            let train = calib.subset(&[0, 1]).unwrap();
            let global = cqpc_fit(&train, &calib, alpha, &learner).unwrap();
            let local = cqpc_fit_with(
                &train,
                &calib,
                alpha,
                &learner,
                CqpcOptions {
                    pooling: PoolingSpec::Count { m: 20 },
                    standardize_pooling: true,
                },
            )
            .unwrap();
            let eval = |m: &CalibratedModel| {
                let preds: Vec<f64> = (0..test.len())
                    .map(|i| m.predict(test.row(i)).unwrap())
                    .collect();
                empirical_pinball(&preds, test.demand(), alpha).unwrap()
            };
            if eval(&local) < eval(&global) {
                local_wins += 1;
            }
        }
        assert!(local_wins >= 17, "local won only {local_wins}/{seeds}");
    }

    #[test]
    fn translation_equivariance_with_linear_base() {
        let mut rng = RngStream::new(246, 0);
        let train = linear_data(&mut rng, 120);
        let calib = linear_data(&mut rng, 60);
        let c = 42.5;
        let train_shift = train
            .with_demand(train.demand().iter().map(|y| y + c).collect())
            .unwrap();
        let calib_shift = calib
            .with_demand(calib.demand().iter().map(|y| y + c).collect())
            .unwrap();
        let learner = LinearQrLearner::new(LinearQrConfig::default());
        let a = cqpc_fit(&train, &calib, ql(0.7), &learner).unwrap();
        let b = cqpc_fit(&train_shift, &calib_shift, ql(0.7), &learner).unwrap();
        for _ in 0..20 {
            let x = [rng.uniform_in(-2.0, 2.0), rng.uniform_in(-2.0, 2.0)];
            let pa = a.predict(&x).unwrap();
            let pb = b.predict(&x).unwrap();
            assert!((pb - pa - c).abs() < 1e-6, "{pb} vs {pa} + {c}");
        }
    }

    struct CountingLearner<'a> {
        inner: &'a dyn QuantileLearner,
        fits: AtomicUsize,
    }

    impl QuantileLearner for CountingLearner<'_> {
        fn name(&self) -> String {
            self.inner.name()
        }
        fn fit(&self, train: &Dataset, alpha: QuantileLevel) -> Result<Box<dyn QuantileModel>> {
            self.fits.fetch_add(1, Ordering::SeqCst);
            self.inner.fit(train, alpha)
        }
    }

    #[test]
    fn gtlc_fits_exactly_once_and_is_deterministic() {
        let mut rng = RngStream::new(99, 0);
        let train = linear_data(&mut rng, 150);
        let calib = linear_data(&mut rng, 100);
        let inner = LinearQrLearner::new(LinearQrConfig::default());
        let learner = CountingLearner {
            inner: &inner,
            fits: AtomicUsize::new(0),
        };
        let candidates = [
            PoolingSpec::Count { m: 10 },
            PoolingSpec::Count { m: 40 },
            PoolingSpec::All,
        ];
        let options = GtlcOptions::default();
        let sel1 = gtlc_select(&train, &calib, ql(0.5), &learner, &candidates, options).unwrap();
        assert_eq!(learner.fits.load(Ordering::SeqCst), 1);
        let sel2 = gtlc_select(&train, &calib, ql(0.5), &learner, &candidates, options).unwrap();
        assert_eq!(sel1.best, sel2.best);
        for (a, b) in sel1.table.iter().zip(&sel2.table) {
            assert_eq!(a.mean_loss, b.mean_loss);
        }
    }

    #[test]
    fn gtlc_single_candidate_returned() {
        let mut rng = RngStream::new(41, 0);
        let train = linear_data(&mut rng, 80);
        let calib = linear_data(&mut rng, 40);
        let learner = LinearQrLearner::new(LinearQrConfig::default());
        let sel = gtlc_select(
            &train,
            &calib,
            ql(0.4),
            &learner,
            &[PoolingSpec::Count { m: 12 }],
            GtlcOptions::default(),
        )
        .unwrap();
        assert_eq!(sel.best, PoolingSpec::Count { m: 12 });
        assert!(sel.table[0].mean_loss.is_some());
    }

    #[test]
    fn gtlc_prefers_local_pooling_under_regional_bias() {
        let mut rng = RngStream::new(1111, 0);
        let make = |gen: &mut RngStream, n: usize| {
            let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![gen.uniform_in(-4.0, 4.0)]).collect();
            let ys: Vec<f64> = rows
                .iter()
                .map(|r| {
                    let q = if r[0] > 0.0 {
                        2.0 * r[0] + 2.0
                    } else {
                        -4.0 * r[0] + 2.0
                    };
                    q + gen.standard_normal()
                })
                .collect();
            dataset(rows, ys)
        };
        let train = make(&mut rng, 60);
        let calib = make(&mut rng, 400);
        // a deliberately misspecified fixed-slope learner
        let learner = FnLearner::new("misspecified", |_t: &Dataset, a| {
            Ok(Box::new(FnModel::new(a, 1, |x| 3.0 * x[0].abs() + 2.0)) as Box<dyn QuantileModel>)
        });
        let k = 5;
        let n2 = calib.len();
        let all_equivalent = n2 * (k - 1) / k;
        let candidates = [
            PoolingSpec::Count { m: all_equivalent },
            PoolingSpec::Count { m: 20 },
        ];
        let sel = gtlc_select(
            &train,
            &calib,
            ql(0.5),
            &learner,
            &candidates,
            GtlcOptions {
                folds: k,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(sel.best, PoolingSpec::Count { m: 20 });
    }

    #[test]
    fn gtlc_infeasible_candidates() {
        let mut rng = RngStream::new(5150, 0);
        let train = linear_data(&mut rng, 50);
        let calib = linear_data(&mut rng, 30);
        let learner = LinearQrLearner::new(LinearQrConfig::default());
        let candidates = [
            PoolingSpec::Count { m: 29 }, // exceeds the 24-point fold complement
            PoolingSpec::Count { m: 10 },
        ];
        let sel = gtlc_select(
            &train,
            &calib,
            ql(0.5),
            &learner,
            &candidates,
            GtlcOptions::default(),
        )
        .unwrap();
        assert!(!sel.table[0].feasible);
        assert_eq!(sel.best, PoolingSpec::Count { m: 10 });
        // all infeasible -> error
        let err = gtlc_select(
            &train,
            &calib,
            ql(0.5),
            &learner,
            &[PoolingSpec::Count { m: 29 }],
            GtlcOptions::default(),
        );
        assert!(matches!(err, Err(Error::NoFeasibleCandidate(_))));
    }
}
