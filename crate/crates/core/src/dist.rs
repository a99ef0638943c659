//! Scalar distribution helpers: error function, normal CDF/PDF, exact
//! binomial tails and binomial-proportion confidence intervals.
//!
//! `erf` is computed from its Maclaurin series for small arguments and from
//! the classical continued fraction for `erfc` otherwise; both converge to
//! full double precision on their ranges (cross-checked against quadrature
//! in the tests, so no tabulated coefficients are needed).

use std::f64::consts::{FRAC_2_SQRT_PI, PI};

/// Error function, accurate to ~1e-15 absolute over the real line.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 2.0 {
        erf_series(x)
    } else {
        1.0 - erfc_cf(x)
    }
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    if x < -2.0 {
        return 2.0 - erfc_cf(-x);
    }
    if x < 2.0 {
        return 1.0 - erf_series(x);
    }
    erfc_cf(x)
}

fn erf_series(x: f64) -> f64 {
    // erf(x) = 2/sqrt(pi) * sum_k (-1)^k x^(2k+1) / (k! (2k+1))
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    for k in 1..200 {
        let kf = k as f64;
        term *= -x2 / kf;
        let add = term / (2.0 * kf + 1.0);
        sum += add;
        if add.abs() < 1e-18 * sum.abs().max(1e-300) {
            break;
        }
    }
    FRAC_2_SQRT_PI * sum
}

fn erfc_cf(x: f64) -> f64 {
    // sqrt(pi) e^{x^2} erfc(x) = 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    // with partial numerators a_k = k/2 and denominators b_k = x, evaluated
    // by the modified Lentz algorithm.
    debug_assert!(x >= 2.0);
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..400 {
        let a = 0.5 * k as f64;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
    }
    (-x * x).exp() / (PI.sqrt() * f)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Exact upper tail `P(K >= k)` for `K ~ Binomial(n, p)`, evaluated with a
/// log-space term recurrence (stable for n up to several thousand).
pub fn binomial_upper_tail(n: u64, p: f64, k: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let ln_p = p.ln();
    let ln_q = (1.0 - p).ln();
    // ln P(K = k)
    let mut ln_term = ln_choose(n, k) + k as f64 * ln_p + (n - k) as f64 * ln_q;
    let mut scaled_sum = 1.0f64; // sum of terms relative to P(K = k)
    let anchor = ln_term;
    for j in k..n {
        // P(K = j+1)/P(K = j) = (n-j)/(j+1) * p/q
        ln_term += ((n - j) as f64 / (j + 1) as f64).ln() + ln_p - ln_q;
        scaled_sum += (ln_term - anchor).exp();
    }
    (anchor + scaled_sum.ln()).exp()
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    let mut acc = 0.0;
    for i in 0..k {
        acc += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    acc
}

/// Wilson 95% score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054; // Phi^{-1}(0.975)
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * ((p * (1.0 - p) + z2 / (4.0 * n)) / n).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Coefficient of determination of the OLS line through `(x, y)` points.
pub fn r_squared(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    (sxy * sxy) / (sxx * syy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_known_values() {
        assert!((erf(0.0)).abs() < 1e-16);
        assert!((erf(0.5) - 0.5204998778130465).abs() < 1e-14);
        assert!((erf(1.0) - 0.8427007929497149).abs() < 1e-14);
        assert!((erf(2.0) - 0.9953222650189527).abs() < 1e-14);
        assert!((erfc(3.0) - 2.2090496998585441e-5).abs() < 1e-18);
        assert!((erf(-1.0) + 0.8427007929497149).abs() < 1e-14);
    }

    #[test]
    fn erf_matches_quadrature() {
        // independent oracle: Simpson quadrature of the Gaussian kernel
        for &x in &[0.3, 0.9, 1.7, 2.4, 3.1] {
            let m = 20_001;
            let h = x / (m - 1) as f64;
            let mut s = 0.0;
            for i in 0..m {
                let t = i as f64 * h;
                let w = if i == 0 || i == m - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                s += w * (-t * t).exp();
            }
            let oracle = FRAC_2_SQRT_PI * s * h / 3.0;
            assert!((erf(x) - oracle).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn normal_cdf_symmetry_and_anchor() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
        for &x in &[0.1, 0.7, 1.3, 2.9] {
            assert!((normal_cdf(x) + normal_cdf(-x) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn binomial_tail_small_case_by_enumeration() {
        // n = 10, p = 0.5: P(K >= 7) = (120 + 45 + 10 + 1)/1024
        let expect = 176.0 / 1024.0;
        assert!((binomial_upper_tail(10, 0.5, 7) - expect).abs() < 1e-14);
        assert_eq!(binomial_upper_tail(10, 0.5, 0), 1.0);
        assert_eq!(binomial_upper_tail(10, 0.5, 11), 0.0);
    }

    #[test]
    fn binomial_tail_matches_normal_regime() {
        // loose sanity: P(K >= n/2 + 3 sqrt(n)/2)/Phi(-3) is O(1)
        let n = 10_000u64;
        let k = (n / 2) as f64 + 1.5 * (n as f64).sqrt();
        let tail = binomial_upper_tail(n, 0.5, k as u64);
        let gauss = normal_cdf(-3.0);
        assert!(tail / gauss > 0.5 && tail / gauss < 2.0);
    }

    #[test]
    fn wilson_interval_covers_point() {
        let (lo, hi) = wilson_interval(300, 1000);
        assert!(lo < 0.3 && 0.3 < hi);
        assert!(hi - lo < 0.06);
    }
}
