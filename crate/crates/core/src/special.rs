//! Error-function evaluations used by the closed-form latent-force kernels.
//!
//! `erf` comes from the FreeBSD msun port in `libm`; the scaled complementary
//! error function `erfcx(x) = exp(x^2) erfc(x)` comes from the Faddeeva
//! package port in `errorfunctions`.

use errorfunctions::RealErrorFunctions;

use crate::dual::Real;

pub const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;
pub const SQRT_PI: f64 = 1.772_453_850_905_516;

#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

#[inline]
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

#[inline]
pub fn erfcx(x: f64) -> f64 {
    RealErrorFunctions::erfcx(x)
}

/// `exp(c + nu^2) * (erf(b - nu) - erf(a - nu))` without forming `exp(nu^2)`.
///
/// When `b - nu` and `a - nu` share a sign the difference is rewritten through
/// `erfc(z) = exp(-z^2) erfcx(z)`, and the exponent `c + nu^2 - (x - nu)^2` is
/// evaluated as `c - x^2 + 2 x nu`, so the `nu^2` terms never meet.
/// Callers guarantee `c + nu^2 <= 0` whenever `a < nu < b`.
pub fn exp_erf_diff(c: f64, nu: f64, a: f64, b: f64) -> f64 {
    exp_erf_diff_generic(c, nu, a, b)
}

pub(crate) fn exp_erf_diff_generic<T: Real>(c: T, nu: T, a: T, b: T) -> T {
    let lo = a - nu;
    let hi = b - nu;
    let tail = |x: T| c - x * x + x * nu * 2.0;
    if lo.re() >= 0.0 && hi.re() >= 0.0 {
        tail(a).exp() * lo.erfcx() - tail(b).exp() * hi.erfcx()
    } else if lo.re() <= 0.0 && hi.re() <= 0.0 {
        tail(b).exp() * (-hi).erfcx() - tail(a).exp() * (-lo).erfcx()
    } else {
        (c + nu * nu).exp() * (hi.erf() - lo.erf())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_values() {
        // Abramowitz & Stegun table values.
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-16);
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-16);
        assert!((erf(2.0) - 0.995_322_265_018_952_7).abs() < 1e-16);
        assert_eq!(erf(0.0), 0.0);
        assert_eq!(erf(-1.0), -erf(1.0));
    }

    #[test]
    fn erfcx_matches_definition_where_representable() {
        for &x in &[-3.0, -0.5, 0.0, 0.3, 1.0, 4.0, 10.0] {
            let direct = (x * x as f64).exp() * erfc(x);
            assert!(((erfcx(x) - direct) / direct).abs() < 1e-13, "x = {x}");
        }
        // Asymptotic 1/(x sqrt(pi)) regime.
        let x = 1e6;
        assert!((erfcx(x) * x * SQRT_PI - 1.0).abs() < 1e-10);
    }

    #[test]
    fn exp_erf_diff_agrees_with_naive_form() {
        let cases = [
            (0.0, 0.2, 1.5),
            (-1.0, -2.0, -0.1),
            (-0.5, -0.7, 0.9),
            (2.0, 1.0, 3.0),
        ];
        for &(s, lo, hi) in &cases {
            let naive = f64::exp(s) * (erf(hi) - erf(lo));
            for nu in [0.0, 0.4, 1.3] {
                let v = exp_erf_diff(s - nu * nu, nu, lo + nu, hi + nu);
                assert!((v - naive).abs() < 1e-14, "{s} {lo} {hi} {nu}");
            }
        }
    }

    #[test]
    fn exp_erf_diff_survives_huge_scale() {
        // exp(900) overflows, the product does not.
        let nu: f64 = 30.0;
        let v = exp_erf_diff(-2.0 * nu, nu, 0.0, 1.0);
        assert!(v.is_finite() && v > 0.0);
        let approx = (-1.0f64).exp() * (erfcx(nu - 1.0) - (-2.0 * nu + 1.0).exp() * erfcx(nu));
        assert!((v - approx).abs() < 1e-15);
    }

    #[test]
    fn exp_erf_diff_keeps_precision_at_extreme_nu() {
        // b = 1, a = 0: the b-term exponent is exactly -1, so for huge nu
        // the value is e^-1 erfcx(nu - 1) - e^(-2 nu) erfcx(nu) ~ e^-1 / (sqrt(pi) nu).
        for nu in [1e4, 1e8, 1e12] {
            let v = exp_erf_diff(-2.0 * nu, nu, 0.0, 1.0);
            let expected = (-1.0f64).exp() * erfcx(nu - 1.0);
            assert!(((v - expected) / expected).abs() < 1e-12, "nu = {nu}");
        }
    }
}
