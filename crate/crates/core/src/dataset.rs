//! Feature/demand datasets, train/calibration/test splitting, and the CSV
//! interchange format.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Per-column affine transform mapping raw coordinates to standardized
/// ones: `x' = (x - mean) / scale`. Scales are strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardization {
    pub fn identity(d: usize) -> Self {
        Self {
            means: vec![0.0; d],
            scales: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn apply_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            x.iter()
                .zip(self.means.iter().zip(&self.scales))
                .map(|(&v, (&m, &s))| (v - m) / s),
        );
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        self.apply_into(x, &mut out);
        out
    }

    /// Composition `self` followed by `next` as a single raw-to-final map.
    fn then(&self, next: &Standardization) -> Standardization {
        let means = self
            .means
            .iter()
            .zip(&self.scales)
            .zip(&next.means)
            .map(|((&m1, &s1), &m2)| m1 + m2 * s1)
            .collect();
        let scales = self
            .scales
            .iter()
            .zip(&next.scales)
            .map(|(&s1, &s2)| s1 * s2)
            .collect();
        Standardization { means, scales }
    }
}

/// An immutable feature matrix plus demand vector.
///
/// When `standardization` is present the stored feature values are already
/// in standardized coordinates and the transform maps raw query points into
/// the same system.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<f64>, // row-major, n * d
    demand: Vec<f64>,
    feature_names: Vec<String>,
    standardization: Option<Standardization>,
    d: usize,
}

impl Dataset {
    pub fn from_rows(
        rows: Vec<Vec<f64>>,
        demand: Vec<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidParameter("dataset needs n >= 1 rows".into()));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(Error::InvalidParameter(
                "dataset needs d >= 1 features".into(),
            ));
        }
        if rows.len() != demand.len() {
            return Err(Error::LengthMismatch {
                left: rows.len(),
                right: demand.len(),
            });
        }
        if feature_names.len() != d {
            return Err(Error::LengthMismatch {
                left: feature_names.len(),
                right: d,
            });
        }
        let mut features = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::InvalidParameter(format!(
                    "row {i} has {} features, expected {d}",
                    row.len()
                )));
            }
            features.extend_from_slice(row);
        }
        Ok(Self {
            features,
            demand,
            feature_names,
            standardization: None,
            d,
        })
    }

    pub fn len(&self) -> usize {
        self.demand.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demand.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn demand(&self) -> &[f64] {
        &self.demand
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    /// Copies the selected rows into a new dataset, carrying the recorded
    /// standardization along.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidParameter("empty row selection".into()));
        }
        let mut features = Vec::with_capacity(indices.len() * self.d);
        let mut demand = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidParameter(format!(
                    "row index {i} out of range (n = {})",
                    self.len()
                )));
            }
            features.extend_from_slice(self.row(i));
            demand.push(self.demand[i]);
        }
        Ok(Self {
            features,
            demand,
            feature_names: self.feature_names.clone(),
            standardization: self.standardization.clone(),
            d: self.d,
        })
    }

    /// Replaces the demand vector (lengths must match).
    pub fn with_demand(&self, demand: Vec<f64>) -> Result<Self> {
        if demand.len() != self.len() {
            return Err(Error::LengthMismatch {
                left: demand.len(),
                right: self.len(),
            });
        }
        let mut out = self.clone();
        out.demand = demand;
        Ok(out)
    }

    /// Centers every feature column to sample mean 0 and scales it to
    /// sample standard deviation 1 (columns with zero variance are centered
    /// and given scale 1). The returned dataset records the raw-to-current
    /// transform, composing with any previously recorded one.
    pub fn standardize(&self) -> Result<Self> {
        let n = self.len();
        if n < 2 {
            return Err(Error::InvalidParameter(
                "standardize needs n >= 2 rows".into(),
            ));
        }
        let d = self.d;
        let mut means = vec![0.0; d];
        for i in 0..n {
            for (j, m) in means.iter_mut().enumerate() {
                *m += self.features[i * d + j];
            }
        }
        for m in &mut means {
            *m /= n as f64;
        }
        let mut scales = vec![0.0; d];
        for i in 0..n {
            for (j, s) in scales.iter_mut().enumerate() {
                let dev = self.features[i * d + j] - means[j];
                *s += dev * dev;
            }
        }
        for s in &mut scales {
            *s = (*s / (n - 1) as f64).sqrt();
            if !(*s > 0.0) || !s.is_finite() {
                *s = 1.0;
            }
        }
        let step = Standardization { means, scales };
        let mut features = Vec::with_capacity(self.features.len());
        for i in 0..n {
            for j in 0..d {
                features.push((self.features[i * d + j] - step.means[j]) / step.scales[j]);
            }
        }
        let standardization = match &self.standardization {
            Some(prev) => prev.then(&step),
            None => step,
        };
        Ok(Self {
            features,
            demand: self.demand.clone(),
            feature_names: self.feature_names.clone(),
            standardization: Some(standardization),
            d,
        })
    }

    /// Reads the CSV interchange format: a header row, one column selected
    /// as demand by name, every other (or explicitly listed) column parsed
    /// as a numeric feature. A non-numeric cell in a used column rejects
    /// the file, naming the 1-based data row and the column.
    pub fn from_csv(
        path: impl AsRef<Path>,
        demand_column: &str,
        feature_columns: Option<&[&str]>,
    ) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path.as_ref())
            .map_err(|e| Error::Csv(e.to_string()))?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Csv(e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect();
        let demand_idx = headers
            .iter()
            .position(|h| h == demand_column)
            .ok_or_else(|| {
                Error::Csv(format!(
                    "missing demand column `{demand_column}` (available: {})",
                    headers.join(", ")
                ))
            })?;
        let feature_idx: Vec<usize> = match feature_columns {
            Some(wanted) => {
                let missing: Vec<&str> = wanted
                    .iter()
                    .copied()
                    .filter(|w| !headers.iter().any(|h| h == w))
                    .collect();
                if !missing.is_empty() {
                    return Err(Error::Csv(format!(
                        "missing feature columns: {}",
                        missing.join(", ")
                    )));
                }
                wanted
                    .iter()
                    .map(|w| headers.iter().position(|h| h == w).unwrap())
                    .collect()
            }
            None => (0..headers.len()).filter(|&i| i != demand_idx).collect(),
        };
        if feature_idx.is_empty() {
            return Err(Error::Csv("no feature columns".into()));
        }
        let feature_names: Vec<String> = feature_idx.iter().map(|&i| headers[i].clone()).collect();

        let mut features = Vec::new();
        let mut demand = Vec::new();
        for (row_no, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Csv(e.to_string()))?;
            let parse = |idx: usize| -> Result<f64> {
                let cell = record.get(idx).unwrap_or("");
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::Csv(format!(
                        "row {}: non-numeric value `{cell}` in column `{}`",
                        row_no + 1,
                        headers[idx]
                    ))
                })
            };
            for &idx in &feature_idx {
                features.push(parse(idx)?);
            }
            demand.push(parse(demand_idx)?);
        }
        if demand.is_empty() {
            return Err(Error::Csv("no data rows".into()));
        }
        Ok(Self {
            features,
            demand,
            feature_names,
            standardization: None,
            d: feature_idx.len(),
        })
    }

    /// Writes the CSV interchange format (features first, demand last).
    pub fn to_csv(&self, path: impl AsRef<Path>, demand_column: &str) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        writeln!(file, "{},{demand_column}", self.feature_names.join(","))?;
        for i in 0..self.len() {
            let mut line = String::new();
            for v in self.row(i) {
                line.push_str(&format!("{v}"));
                line.push(',');
            }
            line.push_str(&format!("{}", self.demand[i]));
            writeln!(file, "{line}")?;
        }
        Ok(())
    }
}

/// Train/calibration/test fractions plus the shuffling seed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub calib_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, calib: f64, test: f64, seed: u64) -> Result<Self> {
        for (name, f) in [("train", train), ("calib", calib), ("test", test)] {
            if !(f.is_finite() && f > 0.0 && f < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} fraction must lie in (0,1), got {f}"
                )));
            }
        }
        if ((train + calib + test) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "fractions must sum to 1, got {}",
                train + calib + test
            )));
        }
        Ok(Self {
            train_fraction: train,
            calib_fraction: calib,
            test_fraction: test,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(
            self.train_fraction,
            self.calib_fraction,
            self.test_fraction,
            self.seed,
        )
        .map(|_| ())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.75,
            calib_fraction: 0.15,
            test_fraction: 0.10,
            seed: 0,
        }
    }
}

/// Disjoint index sets covering 0..n. Calibration and test sizes are
/// `round(n * fraction)`; the remainder goes to the training set, so the
/// calibration size that enters coverage bounds is exactly reproducible
/// from (n, fraction). Each set is returned sorted.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    let n = dataset.len();
    let n_calib = (n as f64 * spec.calib_fraction).round() as usize;
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    if n_calib + n_test > n {
        return Err(Error::InsufficientData { split: "train", n });
    }
    let n_train = n - n_calib - n_test;
    for (name, size) in [
        ("train", n_train),
        ("calibration", n_calib),
        ("test", n_test),
    ] {
        if size == 0 {
            return Err(Error::InsufficientData { split: name, n });
        }
    }
    let perm = RngStream::new(spec.seed, 0xD1CE).permutation(n);
    let mut train: Vec<usize> = perm[..n_train].to_vec();
    let mut calib: Vec<usize> = perm[n_train..n_train + n_calib].to_vec();
    let mut test: Vec<usize> = perm[n_train + n_calib..].to_vec();
    train.sort_unstable();
    calib.sort_unstable();
    test.sort_unstable();
    Ok((train, calib, test))
}
