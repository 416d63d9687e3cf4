//! Scalar numeric kernels: the standard normal distribution and empirical
//! quantiles.
//!
//! The normal CDF and its inverse are implemented in-repo (series plus
//! continued fraction, Newton-refined) so that every platform produces
//! bit-identical simulation streams; libm implementations of `erf` differ
//! across targets. Accuracy is ~1e-14 absolute, well inside the 1e-10
//! contract.

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;
const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// erf by Taylor series; accurate to ~1e-13 for |z| <= 3.
fn erf_series(z: f64) -> f64 {
    let zz = z * z;
    let mut term = z;
    let mut sum = z;
    for n in 1..200 {
        term *= -zz / n as f64;
        let contrib = term / (2 * n + 1) as f64;
        sum += contrib;
        if contrib.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    FRAC_2_SQRT_PI * sum
}

/// erfc by continued fraction (modified Lentz); for z >= 3.
fn erfc_cf(z: f64) -> f64 {
    let tiny = 1e-300;
    let mut f = tiny;
    let mut c = f;
    let mut d = 0.0;
    for n in 1..200 {
        let a = if n == 1 { 1.0 } else { (n - 1) as f64 / 2.0 };
        d = z + a * d;
        if d == 0.0 {
            d = tiny;
        }
        c = z + a / c;
        if c == 0.0 {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
    }
    (-z * z).exp() / std::f64::consts::PI.sqrt() * f
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    let z = x / SQRT_2;
    let az = z.abs();
    if az <= 3.0 {
        0.5 * (1.0 + erf_series(z))
    } else {
        let tail = 0.5 * erfc_cf(az);
        if x > 0.0 {
            1.0 - tail
        } else {
            tail
        }
    }
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal quantile function. Returns NaN outside (0, 1).
///
/// Rational first guess (Abramowitz & Stegun 26.2.22) followed by Newton
/// steps against [`normal_cdf`].
pub fn normal_ppf(p: f64) -> f64 {
    if !(p > 0.0 && p < 1.0) {
        return f64::NAN;
    }
    // Work in the lower tail, where the CDF is well conditioned; mirror
    // back for p > 1/2.
    if p > 0.5 {
        return -lower_tail_ppf(1.0 - p);
    }
    lower_tail_ppf(p)
}

fn lower_tail_ppf(p: f64) -> f64 {
    let t = (-2.0 * p.ln()).sqrt();
    let mut x = -(t - (2.30753 + 0.27061 * t) / (1.0 + 0.99229 * t + 0.04481 * t * t));
    for _ in 0..5 {
        let err = normal_cdf(x) - p;
        if err == 0.0 {
            break;
        }
        x -= err / normal_pdf(x);
    }
    x
}

/// The k-th smallest value with k = ceil(alpha * n), clamped to [1, n].
///
/// This is the plain sorted-order empirical quantile used for learner
/// baselines and leaf values; the conformal correction uses the
/// (n+1)-adjusted rank instead.
///
/// Panics on an empty slice.
pub fn empirical_quantile(values: &[f64], alpha: f64) -> f64 {
    assert!(!values.is_empty(), "empirical_quantile of empty slice");
    let n = values.len();
    let k = (alpha * n as f64).ceil() as i64;
    let k = k.clamp(1, n as i64) as usize;
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    sorted[k - 1]
}
