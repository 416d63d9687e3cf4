//! Pinball ("check") loss, the objective shared by training, calibration
//! selection, and evaluation.
//!
//! The loss is kept in normalized form, weighting overage by `1 - alpha`
//! and underage by `alpha`, so the quantile level alone parameterizes it
//! and results are invariant to the cost scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A quantile level strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha.is_finite() && alpha > 0.0 && alpha < 1.0 {
            Ok(Self(alpha))
        } else {
            Err(Error::InvalidParameter(format!(
                "quantile level must lie in (0,1), got {alpha}"
            )))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for QuantileLevel {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QuantileLevel> for f64 {
    fn from(q: QuantileLevel) -> f64 {
        q.0
    }
}

impl std::fmt::Display for QuantileLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Overage/underage costs per unit, both strictly positive.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostParams {
    c_o: f64,
    c_u: f64,
}

impl CostParams {
    pub fn new(c_o: f64, c_u: f64) -> Result<Self> {
        if !(c_o.is_finite() && c_o > 0.0 && c_u.is_finite() && c_u > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "costs must be positive finite, got c_o = {c_o}, c_u = {c_u}"
            )));
        }
        Ok(Self { c_o, c_u })
    }

    pub fn overage(&self) -> f64 {
        self.c_o
    }

    pub fn underage(&self) -> f64 {
        self.c_u
    }

    /// The critical quantile level c_u / (c_o + c_u).
    pub fn alpha(&self) -> QuantileLevel {
        QuantileLevel(self.c_u / (self.c_o + self.c_u))
    }
}

#[inline]
pub(crate) fn pinball_unchecked(decision: f64, demand: f64, alpha: f64) -> f64 {
    let diff = decision - demand;
    if diff >= 0.0 {
        (1.0 - alpha) * diff
    } else {
        alpha * (-diff)
    }
}

/// Pinball loss (1-a)(decision-demand)+ + a(demand-decision)+.
pub fn pinball(decision: f64, demand: f64, alpha: QuantileLevel) -> Result<f64> {
    if !decision.is_finite() {
        return Err(Error::NonFinite { what: "decision" });
    }
    if !demand.is_finite() {
        return Err(Error::NonFinite { what: "demand" });
    }
    Ok(pinball_unchecked(decision, demand, alpha.get()))
}

/// Mean pinball loss over aligned prediction/target pairs.
pub fn empirical_pinball(
    predictions: &[f64],
    targets: &[f64],
    alpha: QuantileLevel,
) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::InvalidParameter(
            "empirical_pinball needs at least one pair".into(),
        ));
    }
    let mut acc = 0.0;
    for (&p, &y) in predictions.iter().zip(targets) {
        acc += pinball(p, y, alpha)?;
    }
    Ok(acc / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::stats::empirical_quantile;

    fn ql(a: f64) -> QuantileLevel {
        QuantileLevel::new(a).unwrap()
    }

    #[test]
    fn zero_at_equality() {
        for a in [0.1, 0.5, 0.9] {
            assert_eq!(pinball(5.0, 5.0, ql(a)).unwrap(), 0.0);
        }
    }

    #[test]
    fn half_absolute_error_at_median() {
        assert_eq!(pinball(0.0, 2.0, ql(0.5)).unwrap(), 1.0);
    }

    #[test]
    fn cost_weighted_case() {
        // c_o = 3, c_u = 1 -> alpha = 0.25; a = 3, y = 1 -> 0.75 * 2
        let alpha = CostParams::new(3.0, 1.0).unwrap().alpha();
        assert!((alpha.get() - 0.25).abs() < 1e-15);
        assert!((pinball(3.0, 1.0, alpha).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(pinball(f64::NAN, 1.0, ql(0.5)).is_err());
        assert!(pinball(1.0, f64::INFINITY, ql(0.5)).is_err());
    }

    #[test]
    fn empirical_matches_hand_computation() {
        // alpha = 0.25, predictions [1,1,1], targets [0,2,4]:
        // 0.75*1 + 0.25*1 + 0.25*3 over 3 = 0.58333...
        let got = empirical_pinball(&[1.0, 1.0, 1.0], &[0.0, 2.0, 4.0], ql(0.25)).unwrap();
        assert!((got - 0.583_333_333_333_333_3).abs() < 1e-12);
    }

    #[test]
    fn empirical_symmetry_and_zero() {
        assert_eq!(
            empirical_pinball(&[2.0, -2.0], &[2.0, -2.0], ql(0.3)).unwrap(),
            0.0
        );
        let got = empirical_pinball(&[0.0, 0.0], &[2.0, -2.0], ql(0.5)).unwrap();
        assert!((got - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empirical_length_mismatch() {
        assert!(empirical_pinball(&[1.0], &[1.0, 2.0], ql(0.5)).is_err());
    }

    #[test]
    fn nonnegative_and_convex_on_random_triples() {
        let mut rng = RngStream::new(77, 0);
        for _ in 0..10_000 {
            let a1 = rng.uniform_in(-50.0, 50.0);
            let a2 = rng.uniform_in(-50.0, 50.0);
            let y = rng.uniform_in(-50.0, 50.0);
            let alpha = ql(rng.uniform());
            let l1 = pinball(a1, y, alpha).unwrap();
            let l2 = pinball(a2, y, alpha).unwrap();
            let mid = pinball(0.5 * (a1 + a2), y, alpha).unwrap();
            assert!(l1 >= 0.0 && l2 >= 0.0);
            assert!(mid <= 0.5 * (l1 + l2) + 1e-12);
        }
    }

    #[test]
    fn constant_minimizer_is_empirical_quantile() {
        let mut rng = RngStream::new(31, 1);
        for _ in 0..100 {
            let n = 1 + rng.below(50);
            let ys: Vec<f64> = (0..n).map(|_| rng.uniform_in(-10.0, 10.0)).collect();
            let alpha = ql(0.05 + 0.9 * rng.uniform());
            let q = empirical_quantile(&ys, alpha.get());
            let obj = |a: f64| {
                ys.iter()
                    .map(|&y| pinball_unchecked(a, y, alpha.get()))
                    .sum::<f64>()
                    / n as f64
            };
            let at_q = obj(q);
            // grid search over a dense range must not beat the quantile
            let mut best = f64::INFINITY;
            let mut a = -10.5;
            while a <= 10.5 {
                best = best.min(obj(a));
                a += 0.01;
            }
            assert!(
                at_q <= best + 1e-9,
                "quantile not optimal: {at_q} vs {best}"
            );
        }
    }
}
