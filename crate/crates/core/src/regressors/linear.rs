//! Affine quantile regression trained on the pinball loss.
//!
//! The solver is deterministic full-batch subgradient descent with a
//! geometrically decaying step schedule: fixed-length rounds run at a
//! constant step, each round warm-starts from the best iterate seen so
//! far, and the step decays between rounds. On the piecewise-linear
//! pinball objective this restart scheme converges geometrically in
//! practice and needs no external solver.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::{pinball_unchecked, QuantileLevel};
use crate::stats::empirical_quantile;

use super::{check_dim, QuantileLearner, QuantileModel};

/// Step schedule: rounds of `round_len` iterations at constant step,
/// starting from `initial * std(y)` and multiplying by `decay` per round.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepSchedule {
    pub initial: f64,
    pub decay: f64,
    pub round_len: usize,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            initial: 1.0,
            decay: 0.7,
            round_len: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearQrConfig {
    /// Ridge penalty on the slope vector (the intercept is never penalized,
    /// which keeps training translation-equivariant).
    pub ridge_lambda: f64,
    pub max_iters: usize,
    pub step: StepSchedule,
    /// Convergence tolerance on the step size, which bounds the parameter
    /// change per iteration.
    pub tol: f64,
}

impl Default for LinearQrConfig {
    fn default() -> Self {
        Self {
            ridge_lambda: 0.0,
            max_iters: 4000,
            step: StepSchedule::default(),
            tol: 1e-10,
        }
    }
}

impl LinearQrConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter("tol must be positive".into()));
        }
        if !(self.ridge_lambda >= 0.0) {
            return Err(Error::InvalidParameter(
                "ridge_lambda must be nonnegative".into(),
            ));
        }
        if !(self.step.initial > 0.0) || !(self.step.decay > 0.0 && self.step.decay < 1.0) {
            return Err(Error::InvalidParameter(
                "step schedule needs initial > 0 and decay in (0,1)".into(),
            ));
        }
        Ok(())
    }
}

/// A fitted affine quantile model.
#[derive(Debug, Clone)]
pub struct LinearQrModel {
    pub theta: Vec<f64>,
    pub intercept: f64,
    pub alpha: QuantileLevel,
    pub converged: bool,
    pub objective: f64,
}

impl QuantileModel for LinearQrModel {
    fn alpha(&self) -> QuantileLevel {
        self.alpha
    }
    fn dim(&self) -> usize {
        self.theta.len()
    }
    fn predict(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.theta.len(), x)?;
        let mut acc = self.intercept;
        for (t, v) in self.theta.iter().zip(x) {
            acc += t * v;
        }
        Ok(acc)
    }
}

/// Objective value and subgradient at (theta, intercept), fused in one pass.
fn objective_and_subgrad(
    train: &Dataset,
    alpha: f64,
    lambda: f64,
    theta: &[f64],
    intercept: f64,
    grad_theta: &mut [f64],
) -> (f64, f64) {
    let n = train.len() as f64;
    let mut obj = 0.0;
    let mut grad_b = 0.0;
    grad_theta.fill(0.0);
    for i in 0..train.len() {
        let x = train.row(i);
        let y = train.demand()[i];
        let mut pred = intercept;
        for (t, v) in theta.iter().zip(x) {
            pred += t * v;
        }
        obj += pinball_unchecked(pred, y, alpha);
        let w = if pred > y {
            1.0 - alpha
        } else if pred < y {
            -alpha
        } else {
            0.0
        };
        grad_b += w;
        for (g, v) in grad_theta.iter_mut().zip(x) {
            *g += w * v;
        }
    }
    obj /= n;
    grad_b /= n;
    let mut ridge = 0.0;
    for (g, t) in grad_theta.iter_mut().zip(theta) {
        *g = *g / n + 2.0 * lambda * t;
        ridge += t * t;
    }
    (obj + lambda * ridge, grad_b)
}

pub fn fit_linear_qr(
    train: &Dataset,
    alpha: QuantileLevel,
    config: &LinearQrConfig,
) -> Result<LinearQrModel> {
    config.validate()?;
    let n = train.len();
    let d = train.dim();
    let a = alpha.get();

    // Diagonal preconditioner from column variances; degenerate columns
    // fall back to unit scaling.
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut precond = vec![0.0; d];
    for i in 0..n {
        for (p, (v, m)) in precond.iter_mut().zip(train.row(i).iter().zip(&mean)) {
            let dev = v - m;
            *p += dev * dev;
        }
    }
    for p in &mut precond {
        let var = if n > 1 { *p / (n - 1) as f64 } else { 0.0 };
        *p = if var > 1e-12 { 1.0 / var } else { 1.0 };
    }

    let ys = train.demand();
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let y_sd = (ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64).sqrt();

    let mut best_theta = vec![0.0; d];
    let mut best_b = empirical_quantile(ys, a);
    let mut grad = vec![0.0; d];
    let (mut best_obj, _) = objective_and_subgrad(
        train,
        a,
        config.ridge_lambda,
        &best_theta,
        best_b,
        &mut grad,
    );

    let mut step = config.step.initial * y_sd.max(1e-12);
    let mut iters = 0usize;
    let mut converged = false;
    let mut theta = best_theta.clone();
    let mut intercept = best_b;

    'outer: loop {
        if step < config.tol {
            converged = true;
            break;
        }
        theta.copy_from_slice(&best_theta);
        intercept = best_b;
        for _ in 0..config.step.round_len.max(1) {
            if iters >= config.max_iters {
                break 'outer;
            }
            let (obj, grad_b) =
                objective_and_subgrad(train, a, config.ridge_lambda, &theta, intercept, &mut grad);
            if obj < best_obj {
                best_obj = obj;
                best_theta.copy_from_slice(&theta);
                best_b = intercept;
            }
            for (t, (g, p)) in theta.iter_mut().zip(grad.iter().zip(&precond)) {
                *t -= step * g * p;
            }
            intercept -= step * grad_b;
            iters += 1;
        }
        step *= config.step.decay;
    }

    // The final candidate of the last round may beat the recorded best.
    let (obj, _) =
        objective_and_subgrad(train, a, config.ridge_lambda, &theta, intercept, &mut grad);
    if obj < best_obj {
        best_obj = obj;
        best_theta.copy_from_slice(&theta);
        best_b = intercept;
    }

    Ok(LinearQrModel {
        theta: best_theta,
        intercept: best_b,
        alpha,
        converged,
        objective: best_obj,
    })
}

/// Learner wrapper around [`fit_linear_qr`].
#[derive(Debug, Clone, Default)]
pub struct LinearQrLearner {
    pub config: LinearQrConfig,
}

impl LinearQrLearner {
    pub fn new(config: LinearQrConfig) -> Self {
        Self { config }
    }
}

impl QuantileLearner for LinearQrLearner {
    fn name(&self) -> String {
        "linear_qr".into()
    }
    fn fit(&self, train: &Dataset, alpha: QuantileLevel) -> Result<Box<dyn QuantileModel>> {
        Ok(Box::new(fit_linear_qr(train, alpha, &self.config)?))
    }
}
