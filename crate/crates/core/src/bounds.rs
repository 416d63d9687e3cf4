//! Coverage-gap calculators: margin and gap functions, the conditional
//! coverage bound phi, the equalizing margin level (a 2-approximation to
//! the phi-optimal one), pooling-diameter selection, and quantile
//! confidence intervals.
//!
//! Margin functions bound how much probability mass accumulates within a
//! demand offset of the true quantile; the gap function bounds how much
//! the prediction bias can differ between two contexts at a given
//! distance after training on a given sample size. Together they yield
//!
//! ```text
//! phi(delta, B) = h_upper(delta + kappa(n1(B), xi(B)))
//!                 + exp(-2 n2(B) h_lower(delta)^2)
//! ```
//!
//! and the conditional coverage of the calibrated quantile lies within
//! alpha ± phi.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conformal::{cqpc_fit_with, CalibratedModel, CqpcOptions};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::QuantileLevel;
use crate::regressors::QuantileLearner;
use crate::stats::{normal_cdf, normal_ppf};

/// A nondecreasing piecewise-linear curve through the origin, extrapolated
/// beyond the last knot with the final segment's slope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonotoneCurve {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl MonotoneCurve {
    /// Knots must be strictly increasing in x and nondecreasing in y, all
    /// positive in x.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::InvalidParameter(
                "curve needs equally many xs and ys, at least one knot".into(),
            ));
        }
        let mut prev_x = 0.0;
        let mut prev_y = 0.0;
        for (&x, &y) in xs.iter().zip(&ys) {
            if !(x > prev_x) || y < prev_y {
                return Err(Error::InvalidParameter(format!(
                    "curve knots must increase: ({x}, {y}) after ({prev_x}, {prev_y})"
                )));
            }
            prev_x = x;
            prev_y = y;
        }
        Ok(Self { xs, ys })
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let k = self.xs.len();
        let (mut x0, mut y0) = (0.0, 0.0);
        for i in 0..k {
            if t <= self.xs[i] {
                let w = (t - x0) / (self.xs[i] - x0);
                return y0 + w * (self.ys[i] - y0);
            }
            x0 = self.xs[i];
            y0 = self.ys[i];
        }
        // extrapolate with the last positive slope, falling back to the
        // overall chord for flat tails
        let (lx, ly) = (self.xs[k - 1], self.ys[k - 1]);
        let slope = if k >= 2 && self.xs[k - 1] > self.xs[k - 2] {
            let s = (self.ys[k - 1] - self.ys[k - 2]) / (self.xs[k - 1] - self.xs[k - 2]);
            if s > 0.0 {
                s
            } else {
                ly / lx
            }
        } else {
            ly / lx
        };
        ly + slope * (t - lx)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum MarginFamily {
    /// h_upper = c_upper * delta, h_lower = c_lower * delta.
    Linear { c_upper: f64, c_lower: f64 },
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
    Table {
        upper: MonotoneCurve,
        lower: MonotoneCurve,
    },
}

/// Upper/lower margin envelopes: nondecreasing, zero at zero, with
/// h_lower <= h_upper pointwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginSpec {
    family: MarginFamily,
}

fn check_gammas(gamma_low: f64, gamma_high: f64) -> Result<()> {
    if !(gamma_low > 0.0 && gamma_high >= gamma_low && gamma_high.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < gamma_low <= gamma_high < inf, got ({gamma_low}, {gamma_high})"
        )));
    }
    Ok(())
}

/// Margins of demand uniform on [-g, g] with g in [gamma_low, gamma_high]:
/// h_upper = delta / (2 gamma_low), h_lower = delta / (2 gamma_high).
pub fn margin_uniform(gamma_low: f64, gamma_high: f64) -> Result<MarginSpec> {
    check_gammas(gamma_low, gamma_high)?;
    Ok(MarginSpec {
        family: MarginFamily::Linear {
            c_upper: 1.0 / (2.0 * gamma_low),
            c_lower: 1.0 / (2.0 * gamma_high),
        },
    })
}

/// Plain linear margins h_upper = c1 * delta, h_lower = c2 * delta with
/// c1 >= c2 > 0.
pub fn margin_linear(c1: f64, c2: f64) -> Result<MarginSpec> {
    if !(c2 > 0.0 && c1 >= c2 && c1.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "need c1 >= c2 > 0, got ({c1}, {c2})"
        )));
    }
    Ok(MarginSpec {
        family: MarginFamily::Linear {
            c_upper: c1,
            c_lower: c2,
        },
    })
}

/// Margins of Gaussian demand with scale in [gamma_low, gamma_high]:
/// h_upper = Phi(Phi^-1(alpha) + delta/gamma_low) - alpha and h_lower the
/// gamma_high analogue, so both vanish at delta = 0 as the margin
/// condition requires.
pub fn margin_gaussian(
    gamma_low: f64,
    gamma_high: f64,
    alpha: QuantileLevel,
) -> Result<MarginSpec> {
    check_gammas(gamma_low, gamma_high)?;
    Ok(MarginSpec {
        family: MarginFamily::Gaussian {
            gamma_low,
            gamma_high,
            alpha: alpha.get(),
        },
    })
}

/// Margins of exponential demand with rate in [gamma_low, gamma_high]:
/// h_upper = (1-alpha)(1 - exp(-gamma_high delta)), h_lower the gamma_low
/// analogue; both vanish at delta = 0.
pub fn margin_exponential(
    gamma_low: f64,
    gamma_high: f64,
    alpha: QuantileLevel,
) -> Result<MarginSpec> {
    check_gammas(gamma_low, gamma_high)?;
    Ok(MarginSpec {
        family: MarginFamily::Exponential {
            gamma_low,
            gamma_high,
            alpha: alpha.get(),
        },
    })
}

impl MarginSpec {
    /// Table-backed margins from estimated curves.
    pub fn from_curves(upper: MonotoneCurve, lower: MonotoneCurve) -> Self {
        Self {
            family: MarginFamily::Table { upper, lower },
        }
    }

    pub fn h_upper(&self, delta: f64) -> f64 {
        if delta <= 0.0 {
            return 0.0;
        }
        match &self.family {
            MarginFamily::Linear { c_upper, .. } => c_upper * delta,
            MarginFamily::Gaussian {
                gamma_low, alpha, ..
            } => normal_cdf(normal_ppf(*alpha) + delta / gamma_low) - alpha,
            MarginFamily::Exponential {
                gamma_high, alpha, ..
            } => (1.0 - alpha) * (1.0 - (-gamma_high * delta).exp()),
            MarginFamily::Table { upper, .. } => upper.eval(delta),
        }
    }

    pub fn h_lower(&self, delta: f64) -> f64 {
        if delta <= 0.0 {
            return 0.0;
        }
        match &self.family {
            MarginFamily::Linear { c_lower, .. } => c_lower * delta,
            MarginFamily::Gaussian {
                gamma_high, alpha, ..
            } => normal_cdf(normal_ppf(*alpha) + delta / gamma_high) - alpha,
            MarginFamily::Exponential {
                gamma_low, alpha, ..
            } => (1.0 - alpha) * (1.0 - (-gamma_low * delta).exp()),
            MarginFamily::Table { lower, .. } => lower.eval(delta),
        }
    }

    /// Inverts the lower margin by bisection to 1e-10; errors when the
    /// requested value exceeds the function's reachable range.
    pub fn h_lower_inverse(&self, value: f64) -> Result<f64> {
        if value <= 0.0 {
            return Ok(0.0);
        }
        let mut hi = 1.0;
        let mut grow = 0;
        while self.h_lower(hi) < value {
            hi *= 2.0;
            grow += 1;
            if grow > 80 {
                return Err(Error::InvalidParameter(format!(
                    "margin value {value} unreachable by h_lower (sup ~ {})",
                    self.h_lower(hi)
                )));
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let v = self.h_lower(mid);
            if (v - value).abs() <= 1e-10 {
                return Ok(mid);
            }
            if v < value {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi.max(1.0) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// The prediction-error gap bound kappa(n1, xi) = c * sqrt(xi^nu / n1).
/// `nu = 0` makes the gap independent of the pooling diameter; `c = 0`
/// disables it entirely.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GapSpec {
    pub c: f64,
    pub nu: f64,
}

impl GapSpec {
    pub fn new(c: f64, nu: f64) -> Result<Self> {
        if !(c >= 0.0 && c.is_finite() && nu >= 0.0 && nu.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gap needs c >= 0 and nu >= 0, got ({c}, {nu})"
            )));
        }
        Ok(Self { c, nu })
    }

    pub fn zero() -> Self {
        Self { c: 0.0, nu: 0.0 }
    }

    pub fn kappa(&self, n1: f64, xi: f64) -> f64 {
        if self.c == 0.0 {
            return 0.0;
        }
        if !(n1 > 0.0) {
            return f64::INFINITY;
        }
        self.c * (xi.powf(self.nu) / n1).sqrt()
    }
}

/// Anything usable as a prediction-error gap bound. [`GapSpec`] is the
/// standard power-law form; estimated tables and custom shapes (e.g. a
/// bias floor that persists as n grows) plug in through this trait.
pub trait GapFunction {
    fn kappa(&self, n1: f64, xi: f64) -> f64;
}

impl GapFunction for GapSpec {
    fn kappa(&self, n1: f64, xi: f64) -> f64 {
        GapSpec::kappa(self, n1, xi)
    }
}

/// Power-law region model: the ball of diameter xi holds
/// `n * (xi / xi_max)^iota` points, split rho / (1 - rho) between
/// training and calibration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegionModel {
    pub rho: f64,
    pub n: f64,
    pub iota: f64,
    pub xi_max: f64,
}

impl RegionModel {
    pub fn new(rho: f64, n: f64, iota: f64, xi_max: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "rho must lie in (0,1), got {rho}"
            )));
        }
        if !(n >= 1.0 && iota >= 0.0 && xi_max > 0.0) {
            return Err(Error::InvalidParameter(
                "need n >= 1, iota >= 0, xi_max > 0".into(),
            ));
        }
        Ok(Self {
            rho,
            n,
            iota,
            xi_max,
        })
    }

    pub fn n_total(&self, xi: f64) -> f64 {
        self.n * (xi / self.xi_max).powf(self.iota)
    }

    pub fn n1(&self, xi: f64) -> f64 {
        self.rho * self.n_total(xi)
    }

    pub fn n2(&self, xi: f64) -> f64 {
        (1.0 - self.rho) * self.n_total(xi)
    }
}

/// The conditional coverage gap bound at margin level `delta` for the ball
/// of diameter `xi`.
pub fn phi(
    delta: f64,
    region: &RegionModel,
    xi: f64,
    margin: &MarginSpec,
    gap: &dyn GapFunction,
) -> f64 {
    let kappa = gap.kappa(region.n1(xi), xi);
    let h_lo = margin.h_lower(delta);
    margin.h_upper(delta + kappa) + (-2.0 * region.n2(xi) * h_lo * h_lo).exp()
}

/// Solves for the margin level equalizing phi's two terms:
/// h_upper(delta + kappa) = exp(-2 n2 h_lower(delta)^2). The left side
/// increases and the right side decreases in delta, so the difference is
/// bisected; no crossing exists when h_upper(kappa) >= 1 or the terms
/// never meet below the search cap.
pub fn solve_tilde_delta(
    region: &RegionModel,
    xi: f64,
    margin: &MarginSpec,
    gap: &dyn GapFunction,
    tol: f64,
) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("tol must be positive".into()));
    }
    let kappa = gap.kappa(region.n1(xi), xi);
    let n2 = region.n2(xi);
    let g = |delta: f64| {
        let h_lo = margin.h_lower(delta);
        margin.h_upper(delta + kappa) - (-2.0 * n2 * h_lo * h_lo).exp()
    };
    let at_zero = g(0.0);
    if at_zero >= 0.0 {
        return Err(Error::NoCrossing {
            at_zero,
            at_max: at_zero,
            delta_max: 0.0,
        });
    }
    let mut hi = 1.0;
    let cap = 1e9;
    while g(hi) < 0.0 {
        hi *= 2.0;
        if hi > cap {
            return Err(Error::NoCrossing {
                at_zero,
                at_max: g(hi),
                delta_max: hi,
            });
        }
    }
    let mut lo = 0.0;
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        let v = g(mid);
        if v.abs() <= tol {
            return Ok(mid);
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One pooling-diameter candidate's outcome in the 2-approximation search.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct XiCell {
    pub xi: f64,
    /// `(tilde_delta, phi)` when the equalizing level exists.
    pub solution: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PoolSearch {
    pub best_xi: f64,
    pub best_delta: f64,
    pub best_phi: f64,
    pub table: Vec<XiCell>,
}

/// Evaluates phi at the equalizing margin level for every candidate
/// diameter and returns the minimizer: a 2-approximation to the joint
/// (delta, xi) optimum at bisection cost per candidate. Ties prefer the
/// smaller diameter.
pub fn two_approx_pool_search(
    xi_grid: &[f64],
    region: &RegionModel,
    margin: &MarginSpec,
    gap: &dyn GapFunction,
) -> Result<PoolSearch> {
    if xi_grid.is_empty() {
        return Err(Error::InvalidParameter("empty diameter grid".into()));
    }
    let mut grid = xi_grid.to_vec();
    grid.sort_unstable_by(f64::total_cmp);
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64, f64)> = None;
    for &xi in &grid {
        if !(xi > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "diameters must be positive, got {xi}"
            )));
        }
        let cell = match solve_tilde_delta(region, xi, margin, gap, 1e-10) {
            Ok(delta) => {
                let value = phi(delta, region, xi, margin, gap);
                if best.is_none_or(|(_, _, bp)| value < bp) {
                    best = Some((xi, delta, value));
                }
                XiCell {
                    xi,
                    solution: Some((delta, value)),
                }
            }
            Err(Error::NoCrossing { .. }) => XiCell { xi, solution: None },
            Err(e) => return Err(e),
        };
        table.push(cell);
    }
    let (best_xi, best_delta, best_phi) = best.ok_or_else(|| {
        Error::NoFeasibleCandidate("no diameter admits an equalizing margin level".into())
    })?;
    Ok(PoolSearch {
        best_xi,
        best_delta,
        best_phi,
        table,
    })
}

/// Outcome of the linear-margin power-law diameter optimization.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiameterResult {
    /// The gap grows no faster than the data density: pool everything.
    FullRegion,
    /// Stationary diameters, with the phi-minimizing one singled out.
    Roots {
        roots: Vec<f64>,
        best_xi: f64,
        best_phi: Option<f64>,
    },
    /// The stationarity equation has no solution at these parameters.
    NoStationaryPoint { max_l: f64, argmax_xi: f64 },
}

/// Optimal pooling diameter for linear margins h_upper = c1 d,
/// h_lower = c2 d, power-law region n1 = rho n xi^iota, and gap
/// kappa = sqrt(xi^nu / n1). For nu > iota the optimum satisfies
/// sqrt(n xi^(nu+iota)) exp(-c2' xi^nu) = c1'; for nu <= iota pooling the
/// entire region is optimal.
pub fn optimal_diameter_prop1(
    c1: f64,
    c2: f64,
    rho: f64,
    n: f64,
    iota: f64,
    nu: f64,
) -> Result<DiameterResult> {
    if !(c2 > 0.0 && c1 >= c2) {
        return Err(Error::InvalidParameter(format!(
            "need c1 >= c2 > 0, got ({c1}, {c2})"
        )));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "rho must lie in (0,1), got {rho}"
        )));
    }
    if !(n >= 1.0 && iota >= 0.0 && nu >= 0.0) {
        return Err(Error::InvalidParameter(
            "need n >= 1, iota >= 0, nu >= 0".into(),
        ));
    }
    if nu <= iota {
        return Ok(DiameterResult::FullRegion);
    }
    if iota == 0.0 {
        return Err(Error::InvalidParameter(
            "nu > iota requires iota > 0 for the stationarity constants".into(),
        ));
    }
    let c1p = c1 * iota * rho.sqrt() / (4.0 * (nu - iota) * (1.0 - rho) * c2 * c2);
    let c2p = 2.0 * c2 * c2 * ((nu - iota) / iota).powi(2) * (1.0 - rho) / rho;
    let l = |xi: f64| (n * xi.powf(nu + iota)).sqrt() * (-c2p * xi.powf(nu)).exp();

    // L rises then falls; scan a log grid for sign changes of L - c1'
    let (lo_exp, hi_exp, steps) = (-6.0_f64, 3.0_f64, 4000usize);
    let grid_xi = |i: usize| 10f64.powf(lo_exp + (hi_exp - lo_exp) * i as f64 / steps as f64);
    let mut roots = Vec::new();
    let mut max_l = f64::NEG_INFINITY;
    let mut argmax_xi = grid_xi(0);
    let mut prev_xi = grid_xi(0);
    let mut prev_v = l(prev_xi) - c1p;
    if l(prev_xi) > max_l {
        max_l = l(prev_xi);
        argmax_xi = prev_xi;
    }
    for i in 1..=steps {
        let xi = grid_xi(i);
        let v = l(xi) - c1p;
        if l(xi) > max_l {
            max_l = l(xi);
            argmax_xi = xi;
        }
        if prev_v == 0.0 {
            roots.push(prev_xi);
        } else if prev_v * v < 0.0 {
            // refine by bisection on the residual
            let (mut a, mut b) = (prev_xi, xi);
            let (mut fa, _fb) = (prev_v, v);
            for _ in 0..300 {
                let m = 0.5 * (a + b);
                let fm = l(m) - c1p;
                if fm.abs() <= 1e-10 {
                    a = m;
                    b = m;
                    break;
                }
                if fa * fm < 0.0 {
                    b = m;
                } else {
                    a = m;
                    fa = fm;
                }
            }
            roots.push(0.5 * (a + b));
        }
        prev_xi = xi;
        prev_v = v;
    }
    if roots.is_empty() {
        return Ok(DiameterResult::NoStationaryPoint { max_l, argmax_xi });
    }

    // pick the root with the smaller phi at its equalizing margin level
    let margin = margin_linear(c1, c2)?;
    let gap = GapSpec::new(1.0, nu)?;
    let region = RegionModel::new(rho, n, iota, 1.0)?;
    let mut best_xi = roots[0];
    let mut best_phi: Option<f64> = None;
    for &root in &roots {
        if let Ok(delta) = solve_tilde_delta(&region, root, &margin, &gap, 1e-10) {
            let value = phi(delta, &region, root, &margin, &gap);
            if best_phi.is_none_or(|b| value < b) {
                best_phi = Some(value);
                best_xi = root;
            }
        }
    }
    Ok(DiameterResult::Roots {
        roots,
        best_xi,
        best_phi,
    })
}

/// Half-width (in quantile-level units) of the confidence interval for the
/// true quantile:
/// z = h_upper(h_lower^-1(sqrt(log(1/(2 delta)) / (2 n2))) + kappa).
pub fn confidence_z(
    delta_conf: f64,
    region: &RegionModel,
    xi: f64,
    margin: &MarginSpec,
    gap: &dyn GapFunction,
) -> Result<f64> {
    if !(delta_conf > 0.0 && delta_conf < 0.5) {
        return Err(Error::InvalidParameter(format!(
            "confidence delta must lie in (0, 0.5), got {delta_conf}"
        )));
    }
    let target = ((1.0 / (2.0 * delta_conf)).ln() / (2.0 * region.n2(xi))).sqrt();
    let t = margin.h_lower_inverse(target)?;
    Ok(margin.h_upper(t + gap.kappa(region.n1(xi), xi)))
}

/// Supplies calibrated models at requested quantile levels, caching fits.
pub trait CalibratedFactory {
    fn at_level(&mut self, level: QuantileLevel) -> Result<&CalibratedModel>;
}

/// The standard factory: refit the learner on the training slice at each
/// requested level and calibrate on the calibration slice, caching by
/// level so repeated endpoints reuse the same fit.
pub struct CqpcFactory<'a> {
    train: &'a Dataset,
    calib: &'a Dataset,
    learner: &'a dyn QuantileLearner,
    options: CqpcOptions,
    cache: BTreeMap<u64, CalibratedModel>,
    fits: usize,
}

impl<'a> CqpcFactory<'a> {
    pub fn new(
        train: &'a Dataset,
        calib: &'a Dataset,
        learner: &'a dyn QuantileLearner,
        options: CqpcOptions,
    ) -> Self {
        Self {
            train,
            calib,
            learner,
            options,
            cache: BTreeMap::new(),
            fits: 0,
        }
    }

    pub fn fit_count(&self) -> usize {
        self.fits
    }
}

impl CalibratedFactory for CqpcFactory<'_> {
    fn at_level(&mut self, level: QuantileLevel) -> Result<&CalibratedModel> {
        let key = level.get().to_bits();
        if !self.cache.contains_key(&key) {
            let model = cqpc_fit_with(self.train, self.calib, level, self.learner, self.options)?;
            self.fits += 1;
            self.cache.insert(key, model);
        }
        Ok(self.cache.get(&key).unwrap())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    pub z: f64,
}

/// The quantile confidence interval
/// [calibrated at alpha - z, calibrated at alpha + z] at context `x`; z
/// comes from [`confidence_z`] and both endpoints escape (0,1) as an
/// error.
pub fn confidence_interval(
    factory: &mut dyn CalibratedFactory,
    x: &[f64],
    alpha: QuantileLevel,
    delta_conf: f64,
    region: &RegionModel,
    xi: f64,
    margin: &MarginSpec,
    gap: &dyn GapFunction,
) -> Result<ConfidenceInterval> {
    let z = confidence_z(delta_conf, region, xi, margin, gap)?;
    let a = alpha.get();
    if z >= a.min(1.0 - a) {
        return Err(Error::IntervalEscapes { z, alpha: a });
    }
    let lo = factory.at_level(QuantileLevel::new(a - z)?)?.predict(x)?;
    let hi = factory.at_level(QuantileLevel::new(a + z)?)?.predict(x)?;
    Ok(ConfidenceInterval { lo, hi, z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn ql(a: f64) -> QuantileLevel {
        QuantileLevel::new(a).unwrap()
    }

    #[test]
    fn uniform_margin_formulas() {
        let m = margin_uniform(1.0, 2.0).unwrap();
        assert!((m.h_upper(0.5) - 0.25).abs() < 1e-15);
        assert!((m.h_lower(0.5) - 0.125).abs() < 1e-15);
        assert_eq!(m.h_upper(0.0), 0.0);
        assert_eq!(m.h_lower(0.0), 0.0);
        assert!(margin_uniform(2.0, 1.0).is_err());
    }

    #[test]
    fn gaussian_margin_formulas() {
        let m = margin_gaussian(1.0, 2.0, ql(0.5)).unwrap();
        assert!(m.h_upper(0.0).abs() < 1e-15);
        assert!(m.h_lower(0.0).abs() < 1e-15);
        // h_upper(1) = Phi(1) - 0.5 at gamma_low = 1
        assert!((m.h_upper(1.0) - 0.341_344_746_068_542_9).abs() < 1e-10);
    }

    #[test]
    fn exponential_margin_formulas() {
        let m = margin_exponential(1.0, 2.0, ql(0.5)).unwrap();
        assert!(m.h_upper(0.0).abs() < 1e-15);
        // h_upper(1) = 0.5 (1 - e^-2) at gamma_high = 2
        assert!((m.h_upper(1.0) - 0.432_332_358_381_693_65).abs() < 1e-12);
        // h_lower(1) = 0.5 (1 - e^-1)
        assert!((m.h_lower(1.0) - 0.5 * (1.0 - (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn margin_order_and_monotone_on_grid() {
        let alpha = ql(0.5);
        let specs = [
            margin_uniform(1.0, 2.0).unwrap(),
            margin_gaussian(1.0, 2.0, alpha).unwrap(),
            margin_exponential(1.0, 2.0, alpha).unwrap(),
        ];
        for m in &specs {
            let mut prev_up = 0.0;
            let mut prev_lo = 0.0;
            for step in 1..200 {
                let d = step as f64 * 0.02;
                let up = m.h_upper(d);
                let lo = m.h_lower(d);
                assert!(up >= prev_up && lo >= prev_lo, "monotone at {d}");
                assert!(lo <= up + 1e-15, "order at {d}");
                prev_up = up;
                prev_lo = lo;
            }
        }
    }

    /// Monte Carlo sandwich: empirical P(Y <= q* + delta) within the
    /// margin envelopes (three-sigma band), for each closed-form family.
    #[test]
    fn margin_sandwich_monte_carlo() {
        let alpha = 0.5;
        let draws = 20_000;
        let sigma = (alpha * (1.0 - alpha) / draws as f64).sqrt();
        let gamma = 1.5; // interior of [1, 2]
        for family in ["uniform", "gaussian", "exponential"] {
            let spec = match family {
                "uniform" => margin_uniform(1.0, 2.0).unwrap(),
                "gaussian" => margin_gaussian(1.0, 2.0, ql(alpha)).unwrap(),
                _ => margin_exponential(1.0, 2.0, ql(alpha)).unwrap(),
            };
            let mut rng = RngStream::new(888, 0);
            for delta in [0.1, 0.5, 1.0] {
                let mut hits = 0usize;
                for _ in 0..draws {
                    let (y, q) = match family {
                        "uniform" => (rng.uniform_in(-gamma, gamma), (2.0 * alpha - 1.0) * gamma),
                        "gaussian" => (gamma * rng.standard_normal(), gamma * normal_ppf(alpha)),
                        _ => {
                            // exponential with rate gamma via inversion
                            let u = rng.uniform();
                            (-(1.0 - u).ln() / gamma, -(1.0 - alpha).ln() / gamma)
                        }
                    };
                    if y <= q + delta {
                        hits += 1;
                    }
                }
                let rate = hits as f64 / draws as f64;
                let lo = alpha + spec.h_lower(delta) - 3.0 * sigma;
                let hi = alpha + spec.h_upper(delta) + 3.0 * sigma;
                assert!(
                    rate >= lo && rate <= hi,
                    "{family} delta {delta}: {rate} outside [{lo}, {hi}]"
                );
            }
        }
    }

    #[test]
    fn phi_hand_value() {
        // h_upper = d, h_lower = d/2, kappa = 0, n2 = 8, delta = 0.5:
        // 0.5 + exp(-2 * 8 * 0.25^2) = 0.5 + e^-1
        let margin = margin_linear(1.0, 0.5).unwrap();
        let region = RegionModel::new(0.5, 16.0, 0.0, 1.0).unwrap();
        let got = phi(0.5, &region, 1.0, &margin, &GapSpec::zero());
        assert!((got - 0.867_879_441_171_442_3).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn phi_limit_at_zero_delta() {
        let margin = margin_linear(1.0, 1.0).unwrap();
        let region = RegionModel::new(0.5, 100.0, 0.0, 1.0).unwrap();
        let gap = GapSpec::new(0.3, 0.0).unwrap();
        let kappa = gap.kappa(region.n1(1.0), 1.0);
        let got = phi(1e-300, &region, 1.0, &margin, &gap);
        assert!((got - (margin.h_upper(kappa) + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn phi_monotone_pieces() {
        let margin = margin_uniform(1.0, 2.0).unwrap();
        let region = RegionModel::new(0.75, 1e4, 1.0, 1.0).unwrap();
        // nondecreasing in kappa through c
        let mut prev = f64::NEG_INFINITY;
        for c in [0.0, 0.1, 0.5, 1.0, 2.0] {
            let v = phi(0.3, &region, 0.5, &margin, &GapSpec::new(c, 1.0).unwrap());
            assert!(v >= prev);
            prev = v;
        }
        // second term nonincreasing in delta and in n2
        let second = |delta: f64, n2: f64| {
            let h = margin.h_lower(delta);
            (-2.0 * n2 * h * h).exp()
        };
        assert!(second(0.5, 100.0) <= second(0.1, 100.0));
        assert!(second(0.3, 500.0) <= second(0.3, 100.0));
    }

    #[test]
    fn tilde_delta_identity_margin_oracle() {
        // h_upper = h_lower = delta, kappa = 0, n2 = 50: the root of
        // delta = exp(-100 delta^2), 0.14017388 by independent bisection.
        let margin = margin_linear(1.0, 1.0).unwrap();
        let region = RegionModel::new(0.5, 100.0, 0.0, 1.0).unwrap();
        let delta = solve_tilde_delta(&region, 1.0, &margin, &GapSpec::zero(), 1e-10).unwrap();
        assert!(
            (delta - 0.140_173_878_964_745_38).abs() < 1e-6,
            "got {delta}"
        );
    }

    #[test]
    fn tilde_delta_residual_and_bracket() {
        let margin = margin_uniform(1.0, 2.0).unwrap();
        let region = RegionModel::new(0.75, 1e4, 1.0, 1.0).unwrap();
        let gap = GapSpec::new(1.0, 2.0).unwrap();
        for xi in [0.05, 0.2, 0.7, 1.0] {
            let delta = solve_tilde_delta(&region, xi, &margin, &gap, 1e-10).unwrap();
            let kappa = gap.kappa(region.n1(xi), xi);
            let n2 = region.n2(xi);
            let g = |d: f64| {
                let h = margin.h_lower(d);
                margin.h_upper(d + kappa) - (-2.0 * n2 * h * h).exp()
            };
            assert!(g(delta).abs() <= 1e-8, "residual at xi = {xi}");
            assert!(g(delta - 1e-9) <= 1e-8 && g(delta + 1e-9) >= -1e-8);
        }
    }

    #[test]
    fn tilde_delta_no_crossing_when_kappa_dominates() {
        // huge kappa puts h_upper(kappa) >= 1 at delta = 0
        let margin = margin_linear(1.0, 1.0).unwrap();
        let region = RegionModel::new(0.5, 100.0, 0.0, 1.0).unwrap();
        let gap = GapSpec::new(100.0, 0.0).unwrap();
        match solve_tilde_delta(&region, 1.0, &margin, &gap, 1e-10) {
            Err(Error::NoCrossing { .. }) => {}
            other => panic!("expected no-crossing, got {other:?}"),
        }
    }

    #[test]
    fn two_approx_against_dense_grid() {
        let margin = margin_uniform(1.0, 2.0).unwrap();
        let region = RegionModel::new(0.75, 1e4, 1.0, 1.0).unwrap();
        let gap = GapSpec::new(1.0, 2.0).unwrap();
        let xi_grid: Vec<f64> = (1..=60).map(|i| i as f64 / 60.0).collect();
        let found = two_approx_pool_search(&xi_grid, &region, &margin, &gap).unwrap();
        let mut dense_min = f64::INFINITY;
        for &xi in &xi_grid {
            for j in 1..=400 {
                let delta = j as f64 * 0.005;
                dense_min = dense_min.min(phi(delta, &region, xi, &margin, &gap));
            }
        }
        assert!(
            found.best_phi <= 2.0 * dense_min + 1e-6,
            "2-approx violated: {} vs {}",
            found.best_phi,
            dense_min
        );
    }

    #[test]
    fn xi_independent_gap_prefers_full_pooling() {
        // nu = 0: kappa shrinks as the region grows, so the largest
        // diameter wins.
        let margin = margin_uniform(1.0, 2.0).unwrap();
        let region = RegionModel::new(0.75, 1e4, 1.0, 1.0).unwrap();
        let gap = GapSpec::new(0.5, 0.0).unwrap();
        let xi_grid: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
        let found = two_approx_pool_search(&xi_grid, &region, &margin, &gap).unwrap();
        assert!((found.best_xi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_candidate_grid() {
        let margin = margin_uniform(1.0, 2.0).unwrap();
        let region = RegionModel::new(0.75, 1e4, 1.0, 1.0).unwrap();
        let found = two_approx_pool_search(&[0.4], &region, &margin, &GapSpec::zero()).unwrap();
        assert_eq!(found.best_xi, 0.4);
        assert_eq!(found.table.len(), 1);
    }

    /// A gap with a bias component that persists as n grows, the
    /// hypothesis under which the optimal diameter shrinks to zero.
    struct PersistentGap {
        floor_slope: f64,
        sampling: GapSpec,
    }

    impl GapFunction for PersistentGap {
        fn kappa(&self, n1: f64, xi: f64) -> f64 {
            self.floor_slope * xi + self.sampling.kappa(n1, xi)
        }
    }

    #[test]
    fn big_data_shrinks_the_pool() {
        let margin = margin_uniform(1.0, 2.0).unwrap();
        let gap = PersistentGap {
            floor_slope: 0.2,
            sampling: GapSpec::new(1.0, 2.0).unwrap(),
        };
        let xi_grid: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let mut prev = f64::INFINITY;
        for n in [1e3, 1e4, 1e5, 1e6] {
            let region = RegionModel::new(0.75, n, 1.0, 1.0).unwrap();
            let found = two_approx_pool_search(&xi_grid, &region, &margin, &gap).unwrap();
            assert!(
                found.best_xi <= prev + 1e-12,
                "xi grew from {prev} to {} at n = {n}",
                found.best_xi
            );
            prev = found.best_xi;
        }
        assert!(prev < 0.5, "diameter never shrank");
    }

    #[test]
    fn prop1_full_region_sentinel() {
        match optimal_diameter_prop1(1.0, 1.0, 0.5, 1e4, 2.0, 1.0).unwrap() {
            DiameterResult::FullRegion => {}
            other => panic!("expected full region, got {other:?}"),
        }
    }

    #[test]
    fn prop1_roots_satisfy_stationarity() {
        let (c1, c2, rho, n, iota, nu) = (1.0, 1.0, 0.5, 1e4, 1.0, 2.0);
        match optimal_diameter_prop1(c1, c2, rho, n, iota, nu).unwrap() {
            DiameterResult::Roots { roots, best_xi, .. } => {
                assert!(!roots.is_empty());
                let c1p = c1 * iota * rho.sqrt() / (4.0 * (nu - iota) * (1.0 - rho) * c2 * c2);
                let c2p = 2.0 * c2 * c2 * ((nu - iota) / iota).powi(2) * (1.0 - rho) / rho;
                for &xi in &roots {
                    let l = (n * xi.powf(nu + iota)).sqrt() * (-c2p * xi.powf(nu)).exp();
                    assert!((l - c1p).abs() <= 1e-8, "residual {} at {xi}", l - c1p);
                }
                assert!(roots.contains(&best_xi));
            }
            other => panic!("expected roots, got {other:?}"),
        }
    }

    #[test]
    fn prop1_no_stationary_point() {
        // tiny n keeps L below c1'
        match optimal_diameter_prop1(50.0, 0.001, 0.5, 1.0, 1.0, 2.0).unwrap() {
            DiameterResult::NoStationaryPoint { max_l, .. } => {
                assert!(max_l.is_finite());
            }
            other => panic!("expected no stationary point, got {other:?}"),
        }
    }

    #[test]
    fn prop1_feasible_range_widens_with_n() {
        let max_l_of = |n: f64| match optimal_diameter_prop1(50.0, 0.001, 0.5, n, 1.0, 2.0) {
            Ok(DiameterResult::NoStationaryPoint { max_l, .. }) => max_l,
            Ok(DiameterResult::Roots { .. }) => f64::INFINITY,
            other => panic!("unexpected {other:?}"),
        };
        assert!(max_l_of(100.0) > max_l_of(1.0));
    }

    #[test]
    fn confidence_z_identity_margin_oracle() {
        // h_upper = h_lower = identity, kappa = 0, delta = 0.05, n2 = 200:
        // z = sqrt(ln(10) / 400)
        let margin = margin_linear(1.0, 1.0).unwrap();
        let region = RegionModel::new(0.5, 400.0, 0.0, 1.0).unwrap();
        let z = confidence_z(0.05, &region, 1.0, &margin, &GapSpec::zero()).unwrap();
        assert!((z - 0.075_871_356_469_257_32).abs() < 1e-9, "got {z}");
    }

    #[test]
    fn confidence_z_monotonicity() {
        let margin = margin_uniform(1.0, 2.0).unwrap();
        let gap = GapSpec::new(1.0, 2.0).unwrap();
        // nonincreasing in n2 (through n)
        let mut prev = f64::INFINITY;
        for n in [100.0, 400.0, 1600.0, 6400.0] {
            let region = RegionModel::new(0.5, n, 0.0, 1.0).unwrap();
            let z = confidence_z(0.05, &region, 0.5, &margin, &gap).unwrap();
            assert!(z <= prev);
            prev = z;
        }
        // nondecreasing in xi through kappa
        let region = RegionModel::new(0.5, 6400.0, 0.0, 1.0).unwrap();
        let mut prev = 0.0;
        for xi in [0.1, 0.5, 1.0, 2.0] {
            let z = confidence_z(0.05, &region, xi, &margin, &gap).unwrap();
            assert!(z >= prev);
            prev = z;
        }
        // kappa inflation: z at least h_upper(kappa)
        let z = confidence_z(0.05, &region, 2.0, &margin, &gap).unwrap();
        assert!(z >= margin.h_upper(gap.kappa(region.n1(2.0), 2.0)));
    }

    #[test]
    fn factory_caches_fits_by_level() {
        use crate::conformal::CqpcOptions;
        use crate::regressors::{LinearQrConfig, LinearQrLearner};
        use crate::rng::RngStream;

        let mut rng = RngStream::new(73, 0);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.uniform()]).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r[0] + rng.standard_normal()).collect();
        let data = crate::dataset::Dataset::from_rows(rows, ys, vec!["x".into()]).unwrap();
        let train = data.subset(&(0..40).collect::<Vec<_>>()).unwrap();
        let calib = data.subset(&(40..60).collect::<Vec<_>>()).unwrap();
        let learner = LinearQrLearner::new(LinearQrConfig {
            max_iters: 200,
            ..Default::default()
        });
        let mut factory = CqpcFactory::new(&train, &calib, &learner, CqpcOptions::default());
        let a = ql(0.4);
        let b = ql(0.6);
        factory.at_level(a).unwrap();
        factory.at_level(b).unwrap();
        factory.at_level(a).unwrap();
        assert_eq!(factory.fit_count(), 2);
    }

    #[test]
    fn interval_escape_errors() {
        use crate::conformal::CqpcOptions;
        use crate::regressors::{LinearQrConfig, LinearQrLearner};
        use crate::rng::RngStream;

        let mut rng = RngStream::new(74, 0);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.uniform()]).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r[0] + rng.standard_normal()).collect();
        let data = crate::dataset::Dataset::from_rows(rows, ys, vec!["x".into()]).unwrap();
        let train = data.subset(&(0..20).collect::<Vec<_>>()).unwrap();
        let calib = data.subset(&(20..40).collect::<Vec<_>>()).unwrap();
        let learner = LinearQrLearner::new(LinearQrConfig {
            max_iters: 100,
            ..Default::default()
        });
        let mut factory = CqpcFactory::new(&train, &calib, &learner, CqpcOptions::default());
        // tiny n2 makes z large; alpha close to the boundary escapes
        let margin = margin_linear(1.0, 1.0).unwrap();
        let region = RegionModel::new(0.5, 8.0, 0.0, 1.0).unwrap();
        let err = confidence_interval(
            &mut factory,
            &[0.5],
            ql(0.05),
            0.05,
            &region,
            1.0,
            &margin,
            &GapSpec::zero(),
        );
        assert!(matches!(err, Err(Error::IntervalEscapes { .. })));
    }

    #[test]
    fn monotone_curve_eval() {
        let c = MonotoneCurve::new(vec![1.0, 2.0, 4.0], vec![0.5, 0.6, 1.0]).unwrap();
        assert_eq!(c.eval(0.0), 0.0);
        assert!((c.eval(0.5) - 0.25).abs() < 1e-15);
        assert!((c.eval(1.5) - 0.55).abs() < 1e-15);
        assert!((c.eval(6.0) - 1.4).abs() < 1e-12); // last slope 0.2
        assert!(MonotoneCurve::new(vec![1.0, 1.0], vec![0.1, 0.2]).is_err());
    }
}
