//! Synthetic demand generators with standard normal noise.
//!
//! Five families: a ten-dimensional multivariate logistic response (`ml`),
//! a ten-dimensional additive logistic response (`ma`), a uniform-bias
//! misspecification showcase (`example2`, demand `|x'theta| + theta0`), a
//! piecewise-slope showcase (`example3`, slope 2 right of zero and 4 left
//! of zero), and a plain linear model whose true conditional quantile is
//! known in closed form for coverage suites.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::stats::normal_ppf;

/// Coefficients of the additive logistic response.
pub const MA_THETA: [f64; 10] = [2.0, -4.0, 2.0, -1.0, 3.0, 5.0, -2.0, -1.0, 0.5, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorFamily {
    Ml,
    Ma,
    Example2,
    Example3,
    Linear,
}

impl std::fmt::Display for GeneratorFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GeneratorFamily::Ml => "ml",
            GeneratorFamily::Ma => "ma",
            GeneratorFamily::Example2 => "example2",
            GeneratorFamily::Example3 => "example3",
            GeneratorFamily::Linear => "linear",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub family: GeneratorFamily,
    /// Feature dimension; `ml`/`ma` require 10, `example3` requires 1.
    pub d: usize,
    /// Coefficients for the linear/example2 families (cyclic default) and
    /// an override for `ma`.
    pub theta: Option<Vec<f64>>,
    /// Intercept of the example2 family.
    pub theta0: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn new(family: GeneratorFamily, seed: u64) -> Self {
        let d = match family {
            GeneratorFamily::Ml | GeneratorFamily::Ma => 10,
            GeneratorFamily::Example3 => 1,
            _ => 3,
        };
        Self {
            family,
            d,
            theta: None,
            theta0: 5.0,
            seed,
        }
    }

    pub fn with_dim(mut self, d: usize) -> Self {
        self.d = d;
        self
    }

    fn validate(&self) -> Result<()> {
        match self.family {
            GeneratorFamily::Ml | GeneratorFamily::Ma if self.d != 10 => {
                Err(Error::DimensionMismatch {
                    expected: 10,
                    got: self.d,
                })
            }
            GeneratorFamily::Example3 if self.d != 1 => Err(Error::DimensionMismatch {
                expected: 1,
                got: self.d,
            }),
            _ if self.d == 0 => Err(Error::InvalidParameter("d must be >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Effective coefficient vector for theta-driven families.
    pub fn effective_theta(&self) -> Vec<f64> {
        if let Some(t) = &self.theta {
            return t.clone();
        }
        match self.family {
            GeneratorFamily::Ma => MA_THETA.to_vec(),
            _ => {
                const CYCLE: [f64; 5] = [2.0, -1.0, 1.0, -0.5, 0.5];
                (0..self.d).map(|j| CYCLE[j % CYCLE.len()]).collect()
            }
        }
    }
}

/// The multivariate logistic response (ten terms, fixed structure).
pub fn f_ml(x: &[f64]) -> Result<f64> {
    if x.len() != 10 {
        return Err(Error::DimensionMismatch {
            expected: 10,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "f_ml input" });
    }
    Ok((x[0] - 0.5).exp()
        + 2.0 * (x[1] + x[2] - 1.0).powi(2)
        + (x[3] - 0.5).abs()
        + (x[4] - 1.0).exp()
        + 2.0 * (x[5] + 3.0 * x[6] - 1.0).powi(2)
        + (x[7] - 0.2).abs()
        + x[8] * x[8]
        + 0.5 * x[9])
}

/// The additive logistic response exp(t'x) / (1 + exp(t'x)) with the fixed
/// coefficient vector, evaluated without overflow for large |t'x|.
pub fn f_ma(x: &[f64]) -> Result<f64> {
    if x.len() != 10 {
        return Err(Error::DimensionMismatch {
            expected: 10,
            got: x.len(),
        });
    }
    let z: f64 = x.iter().zip(MA_THETA.iter()).map(|(a, b)| a * b).sum();
    Ok(stable_logistic(z))
}

fn stable_logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn piecewise_example3(x: f64) -> f64 {
    if x > 0.0 {
        2.0 * x.abs() + 2.0
    } else {
        4.0 * x.abs() + 2.0
    }
}

/// Draws `n` rows from the configured family. Covariates are i.i.d.
/// uniform on the unit interval per dimension, except `example3` which is
/// uniform on \[-4,4\]; demand is the family response plus standard
/// normal noise.
pub fn generate(spec: &GeneratorSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidParameter("n must be >= 1".into()));
    }
    let mut rng = RngStream::new(spec.seed, 0x9E7);
    let theta = spec.effective_theta();
    let mut rows = Vec::with_capacity(n);
    let mut demand = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = match spec.family {
            GeneratorFamily::Example3 => vec![rng.uniform_in(-4.0, 4.0)],
            _ => (0..spec.d).map(|_| rng.uniform()).collect(),
        };
        let noise = rng.standard_normal();
        let y = match spec.family {
            GeneratorFamily::Ml => f_ml(&x)? + noise,
            GeneratorFamily::Ma => f_ma(&x)? + noise,
            GeneratorFamily::Example2 => {
                let dot: f64 = x.iter().zip(&theta).map(|(a, b)| a * b).sum();
                dot.abs() + spec.theta0 + noise
            }
            GeneratorFamily::Example3 => piecewise_example3(x[0]) + noise,
            GeneratorFamily::Linear => {
                let dot: f64 = x.iter().zip(&theta).map(|(a, b)| a * b).sum();
                dot + noise
            }
        };
        rows.push(x);
        demand.push(y);
    }
    let names = (0..spec.d).map(|j| format!("x{}", j + 1)).collect();
    Dataset::from_rows(rows, demand, names)
}

/// The true conditional alpha-quantile, available for every family whose
/// noise enters additively (all of them, with standard normal noise).
pub fn true_quantile(spec: &GeneratorSpec, x: &[f64], alpha: f64) -> Result<f64> {
    spec.validate()?;
    let shift = normal_ppf(alpha);
    if !shift.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0,1), got {alpha}"
        )));
    }
    let theta = spec.effective_theta();
    let base = match spec.family {
        GeneratorFamily::Ml => f_ml(x)?,
        GeneratorFamily::Ma => f_ma(x)?,
        GeneratorFamily::Example2 => {
            let dot: f64 = x.iter().zip(&theta).map(|(a, b)| a * b).sum();
            dot.abs() + spec.theta0
        }
        GeneratorFamily::Example3 => piecewise_example3(x[0]),
        GeneratorFamily::Linear => x.iter().zip(&theta).map(|(a, b)| a * b).sum(),
    };
    Ok(base + shift)
}
