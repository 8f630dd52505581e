//! Scalar helpers shared across modules: Gaussian density and tails,
//! stabilized log-sum-exp, entropy terms.

use std::f64::consts::PI;

use libm::erfc;

pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail `Q(x) = P(g > x)`, accurate far into the tail.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Smallest `a >= 0` with `phi(a) <= level`.
pub fn normal_pdf_inverse_tail(level: f64) -> f64 {
    let arg = level * (2.0 * PI).sqrt();
    if arg >= 1.0 {
        0.0
    } else {
        (-2.0 * arg.ln()).sqrt()
    }
}

/// `ln sum exp(v)` with the maximum shifted out. Empty or all `-inf` input
/// yields `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `-p ln p` with `0 ln 0 = 0`.
pub fn neg_xlogx(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

/// Binary entropy in nats.
pub fn binary_entropy(q: f64) -> f64 {
    neg_xlogx(q) + neg_xlogx(1.0 - q)
}

/// `sech^2(x)` without overflow for large `|x|`.
pub fn sech_sq(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    4.0 * e / ((1.0 + e) * (1.0 + e))
}

/// `ln cosh(x)` without overflow.
pub fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tails() {
        assert!((normal_sf(1.0) - 0.158_655_253_931_457_07).abs() < 1e-15);
        assert!((normal_cdf(-2.0) - 0.022_750_131_948_179_195).abs() < 1e-15);
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!(normal_sf(37.0) > 0.0);
    }

    #[test]
    fn inverse_tail_hits_level() {
        let a = normal_pdf_inverse_tail(1e-7);
        assert!((normal_pdf(a) - 1e-7).abs() < 1e-15);
        assert_eq!(normal_pdf_inverse_tail(1.0), 0.0);
    }

    #[test]
    fn lse_is_stable() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn hyperbolic_helpers() {
        for &x in &[-3.0, -0.2, 0.0, 0.7, 5.0] {
            let c: f64 = f64::cosh(x);
            assert!((sech_sq(x) - 1.0 / (c * c)).abs() < 1e-15);
            assert!((ln_cosh(x) - c.ln()).abs() < 1e-14);
        }
        assert_eq!(sech_sq(1e6), 0.0);
        assert!((ln_cosh(1e6) - (1e6 - 2f64.ln())).abs() < 1e-6);
    }

    #[test]
    fn entropy_terms() {
        assert_eq!(binary_entropy(0.0), 0.0);
        assert!((binary_entropy(0.5) - 2f64.ln()).abs() < 1e-15);
    }
}
