//! Scalar numerics shared across the crate: logistic functions and the
//! standard normal distribution (pdf, cdf, quantile) built on `statrs` erf.

use statrs::function::erf::{erf, erf_inv};

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_68;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// d/dx sigmoid(x) expressed through the output value.
#[inline]
pub fn sigmoid_deriv_from_output(s: f64) -> f64 {
    s * (1.0 - s)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x), stable for large |x|
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// d/dx softplus(x) = sigmoid(x).
#[inline]
pub fn softplus_deriv(x: f64) -> f64 {
    sigmoid(x)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal CDF via the error function.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / SQRT_2))
}

/// Standard normal quantile via the inverse error function.
/// p must lie in (0, 1); endpoints map to +/- infinity.
#[inline]
pub fn normal_quantile(p: f64) -> f64 {
    SQRT_2 * erf_inv(2.0 * p - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sigmoid_symmetry_and_range() {
        assert_relative_eq!(sigmoid(0.0), 0.5);
        assert_relative_eq!(sigmoid(3.0) + sigmoid(-3.0), 1.0, epsilon = 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for &x in &[-5.0, -0.3, 0.0, 1.7, 8.0] {
            assert_relative_eq!(softplus(x), (1.0 + f64::exp(x)).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn normal_cdf_quantile_roundtrip() {
        for &p in &[1e-6, 0.01, 0.3, 0.5, 0.9, 1.0 - 1e-6] {
            assert_relative_eq!(normal_cdf(normal_quantile(p)), p, epsilon = 1e-10);
        }
    }

    #[test]
    fn normal_cdf_known_values() {
        assert_relative_eq!(normal_cdf(0.0), 0.5);
        // one-sigma mass
        assert_relative_eq!(normal_cdf(1.0) - normal_cdf(-1.0), 0.682_689_492_137_086, epsilon = 1e-10);
    }
}
