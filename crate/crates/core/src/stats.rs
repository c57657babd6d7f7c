//! Numerical primitives: the standard normal distribution, the exact
//! binomial test and Bonferroni thresholds.

use thiserror::Error;

const SQRT_2: f64 = core::f64::consts::SQRT_2;

/// Standard normal CDF, `Φ(z) = erfc(-z/√2) / 2`.
///
/// `erfc` keeps full relative precision in the lower tail, so `Φ(-8)` is
/// accurate to the last few bits rather than to `1e-16` absolute.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Two-sided tail probability `2·(1 − Φ(|z|))`, computed without
/// cancellation.
pub fn normal_two_sided_p(z: f64) -> f64 {
    libm::erfc(libm::fabs(z) / SQRT_2).min(1.0)
}

/// Inverse of the standard normal CDF (Wichura's AS 241, double precision).
///
/// Returns `-∞` at 0, `+∞` at 1 and NaN outside `[0, 1]`.
#[allow(clippy::excessive_precision)]
pub fn normal_quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if libm::fabs(q) <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853)
                * r
                + 45921.953931549871457)
                * r
                + 13731.693765509461125)
                * r
                + 1971.5909503065514427)
                * r
                + 133.14166789178437745)
                * r
                + 3.387132872796366608)
            / (((((((5226.495278852545925 * r + 28729.085735721942674) * r + 39307.89580009271061) * r
                + 21213.794301586595867)
                * r
                + 5394.1960214247511077)
                * r
                + 687.1870074920579083)
                * r
                + 42.313330701600911252)
                * r
                + 1.0);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let r = libm::sqrt(-libm::log(tail));
    let x = if r <= 5.0 {
        let r = r - 1.6;
        (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734)
            / (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
                + 0.0151986665636164571966)
                * r
                + 0.14810397642748007459)
                * r
                + 0.68976733498510000455)
                * r
                + 1.6763848301838038494)
                * r
                + 2.05319162663775882187)
                * r
                + 1.0)
    } else {
        let r = r - 5.0;
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386)
            * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772)
            / (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                + 1.8463183175100546818e-5)
                * r
                + 7.868691311456132591e-4)
                * r
                + 0.0148753612908506148525)
                * r
                + 0.13692988092273580531)
                * r
                + 0.59983220655588793769)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// Arithmetic mean and Bessel-corrected sample standard deviation.
///
/// Returns `None` for fewer than two values.
pub fn mean_and_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Some((mean, libm::sqrt(ss / (n - 1.0))))
}

/// Error from [`bonferroni_threshold`].
#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum BonferroniError {
    /// The family contains no tests.
    #[error("family size must be at least 1")]
    EmptyFamily,
    /// Alpha outside (0, 1).
    #[error("family-wise alpha {0} must lie in (0, 1)")]
    InvalidAlpha(f64),
}

/// Per-test significance threshold `alpha / m` controlling the family-wise
/// error rate at `alpha`.
pub fn bonferroni_threshold(alpha: f64, m: usize) -> Result<f64, BonferroniError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BonferroniError::InvalidAlpha(alpha));
    }
    if m == 0 {
        return Err(BonferroniError::EmptyFamily);
    }
    Ok(alpha / m as f64)
}

/// `ln C(n, k) + n·ln(1/2)`: log-probability of `k` successes under
/// `Binomial(n, 1/2)`.
fn ln_binomial_half_pmf(n: u64, k: u64) -> f64 {
    libm::lgamma(n as f64 + 1.0)
        - libm::lgamma(k as f64 + 1.0)
        - libm::lgamma((n - k) as f64 + 1.0)
        - n as f64 * core::f64::consts::LN_2
}

/// Exact two-sided test of `k ~ Binomial(n, 1/2)`.
///
/// The p-value sums the probabilities of all outcomes no more likely than
/// the observed one (with a `1e-7` relative slack so that mirror-image
/// outcomes are not lost to rounding). Returns 1 for `n = 0`.
pub fn binomial_half_two_sided(k: u64, n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let k = k.min(n);
    let observed = ln_binomial_half_pmf(n, k);
    let slack = libm::log(1.0 + 1e-7);
    // Normalising by the total cancels the rounding of the log-gamma terms
    // and makes the p-value exactly 1 when every outcome is included.
    let (tail, total) = (0..=n).map(|j| ln_binomial_half_pmf(n, j)).fold((0.0, 0.0), |(tail, total), lp| {
        let p = libm::exp(lp);
        (if lp <= observed + slack { tail + p } else { tail }, total + p)
    });
    (tail / total).min(1.0)
}
