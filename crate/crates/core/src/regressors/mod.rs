//! Pluggable quantile predictors behind one fit/predict contract.
//!
//! Calibration is learner-agnostic: anything implementing
//! [`QuantileLearner`] can be trained, conformalized, and swept. The crate
//! ships a linear pinball regressor, gradient-boosted quantile trees, and a
//! k-nearest-neighbor quantile baseline.

mod gbq;
mod knnq;
mod linear;

pub use gbq::{fit_gbq, GbqConfig, GbqLearner, GbqModel};
pub use knnq::{fit_knnq, KnnqConfig, KnnqLearner, KnnqModel};
pub use linear::{fit_linear_qr, LinearQrConfig, LinearQrLearner, LinearQrModel, StepSchedule};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::QuantileLevel;

/// A fitted conditional quantile predictor. Prediction is deterministic
/// and accepts any feature vector of the training dimension.
pub trait QuantileModel: Send + Sync {
    fn alpha(&self) -> QuantileLevel;
    fn dim(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Result<f64>;

    fn predict_batch(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        (0..dataset.len())
            .map(|i| self.predict(dataset.row(i)))
            .collect()
    }
}

/// A quantile regression algorithm: fits a model at a requested level.
pub trait QuantileLearner: Send + Sync {
    fn name(&self) -> String;
    fn fit(&self, train: &Dataset, alpha: QuantileLevel) -> Result<Box<dyn QuantileModel>>;
}

pub(crate) fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: x.len(),
        });
    }
    Ok(())
}

/// Wraps a model and shifts every prediction by a constant.
pub struct OffsetModel<M> {
    pub inner: M,
    pub offset: f64,
}

impl<M: QuantileModel> QuantileModel for OffsetModel<M> {
    fn alpha(&self) -> QuantileLevel {
        self.inner.alpha()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.inner.predict(x)? + self.offset)
    }
}

/// A closure-backed predictor, handy for fixed analytic baselines.
pub struct FnModel {
    alpha: QuantileLevel,
    dim: usize,
    f: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl FnModel {
    pub fn new(
        alpha: QuantileLevel,
        dim: usize,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            alpha,
            dim,
            f: Box::new(f),
        }
    }
}

impl QuantileModel for FnModel {
    fn alpha(&self) -> QuantileLevel {
        self.alpha
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn predict(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x)?;
        Ok((self.f)(x))
    }
}

/// A closure-backed learner; the closure maps (train, alpha) to a model.
pub struct FnLearner<F> {
    name: String,
    f: F,
}

impl<F> FnLearner<F>
where
    F: Fn(&Dataset, QuantileLevel) -> Result<Box<dyn QuantileModel>> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self {
            name: name.into(),
            f,
        }
    }
}

impl<F> QuantileLearner for FnLearner<F>
where
    F: Fn(&Dataset, QuantileLevel) -> Result<Box<dyn QuantileModel>> + Send + Sync,
{
    fn name(&self) -> String {
        self.name.clone()
    }
    fn fit(&self, train: &Dataset, alpha: QuantileLevel) -> Result<Box<dyn QuantileModel>> {
        (self.f)(train, alpha)
    }
}
