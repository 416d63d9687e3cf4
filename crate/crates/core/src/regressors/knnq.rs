//! k-nearest-neighbor quantile prediction: the empirical alpha-quantile of
//! the demands of the k nearest training points under standardized
//! Euclidean distance, ties broken by lower row index.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Standardization};
use crate::error::{Error, Result};
use crate::loss::QuantileLevel;
use crate::neighbors::NeighborIndex;
use crate::stats::empirical_quantile;

use super::{check_dim, QuantileLearner, QuantileModel};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnqConfig {
    pub k: usize,
}

impl Default for KnnqConfig {
    fn default() -> Self {
        Self { k: 25 }
    }
}

/// A fitted k-NN quantile model.
pub struct KnnqModel {
    index: NeighborIndex,
    demands: Vec<f64>,
    /// Applied to incoming queries when the training data arrived in raw
    /// coordinates; `None` when the dataset was already standardized (the
    /// query is then expected in the same coordinates).
    transform: Option<Standardization>,
    k: usize,
    alpha: QuantileLevel,
}

impl QuantileModel for KnnqModel {
    fn alpha(&self) -> QuantileLevel {
        self.alpha
    }
    fn dim(&self) -> usize {
        self.index.dim()
    }
    fn predict(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.index.dim(), x)?;
        let neighbors = match &self.transform {
            Some(tr) => self.index.k_nearest(&tr.apply(x), self.k)?,
            None => self.index.k_nearest(x, self.k)?,
        };
        let demands: Vec<f64> = neighbors.iter().map(|&i| self.demands[i]).collect();
        Ok(empirical_quantile(&demands, self.alpha.get()))
    }
}

pub fn fit_knnq(train: &Dataset, alpha: QuantileLevel, config: &KnnqConfig) -> Result<KnnqModel> {
    let n = train.len();
    if config.k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    if config.k > n {
        return Err(Error::PoolingCountTooLarge {
            m: config.k,
            available: n,
        });
    }
    let (coords, transform) = if train.standardization().is_some() || n < 2 {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| train.row(i).to_vec()).collect();
        (rows, None)
    } else {
        let std = train.standardize()?;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| std.row(i).to_vec()).collect();
        (rows, std.standardization().cloned())
    };
    Ok(KnnqModel {
        index: NeighborIndex::build(&coords)?,
        demands: train.demand().to_vec(),
        transform,
        k: config.k,
        alpha,
    })
}

/// Learner wrapper around [`fit_knnq`].
#[derive(Debug, Clone, Default)]
pub struct KnnqLearner {
    pub config: KnnqConfig,
}

impl KnnqLearner {
    pub fn new(config: KnnqConfig) -> Self {
        Self { config }
    }
}

impl QuantileLearner for KnnqLearner {
    fn name(&self) -> String {
        "knnq".into()
    }
    fn fit(&self, train: &Dataset, alpha: QuantileLevel) -> Result<Box<dyn QuantileModel>> {
        Ok(Box::new(fit_knnq(train, alpha, &self.config)?))
    }
}
