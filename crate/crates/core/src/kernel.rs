//! Base covariance functions.
//!
//! All kernels take scalar times in hours. The stationary kernels carry an
//! explicit output scale `sigma`; the causal force kernel has unit scale.
//!
//! Note the causal force kernel divides the squared warped distance by
//! `ell^2`, not `2 ell^2` as the squared exponential does. Both conventions are
//! kept exactly as stated; the force length-scales are therefore not directly
//! comparable with the SE length-scales.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_positive, Result};

/// Whether a latent force is pinned to zero before its mark time.
///
/// `Unzeroed` uses the causal kernel as is: the force is constant (but
/// random) before the mark. `Zeroed` multiplies the force by `1(t > t_m)`,
/// so pre-mark values are exactly zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForceConvention {
    #[default]
    Unzeroed,
    Zeroed,
}

impl std::str::FromStr for ForceConvention {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "unzeroed" => Ok(ForceConvention::Unzeroed),
            "zeroed" => Ok(ForceConvention::Zeroed),
            other => Err(format!("unknown force convention '{other}' (expected zeroed or unzeroed)")),
        }
    }
}

impl std::fmt::Display for ForceConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ForceConvention::Unzeroed => "unzeroed",
            ForceConvention::Zeroed => "zeroed",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelSpec {
    Se {
        sigma: f64,
        length_scale: f64,
    },
    Periodic {
        sigma: f64,
        length_scale: f64,
        period: f64,
    },
    Ou {
        sigma: f64,
        length_scale: f64,
    },
    CausalForce {
        length_scale: f64,
        mark_time: f64,
    },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Se {
                sigma,
                length_scale,
            }
            | KernelSpec::Ou {
                sigma,
                length_scale,
            } => {
                ensure_positive("sigma", sigma)?;
                ensure_positive("length_scale", length_scale)
            }
            KernelSpec::Periodic {
                sigma,
                length_scale,
                period,
            } => {
                ensure_positive("sigma", sigma)?;
                ensure_positive("length_scale", length_scale)?;
                ensure_positive("period", period)
            }
            KernelSpec::CausalForce {
                length_scale,
                mark_time,
            } => {
                ensure_positive("length_scale", length_scale)?;
                ensure_finite("mark_time", mark_time)
            }
        }
    }

    /// Pointwise evaluation. Assumes `validate` has already passed.
    #[inline]
    pub fn eval(&self, t: f64, t2: f64) -> f64 {
        match *self {
            KernelSpec::Se {
                sigma,
                length_scale,
            } => se_raw(t - t2, sigma, length_scale),
            KernelSpec::Periodic {
                sigma,
                length_scale,
                period,
            } => periodic_raw(t - t2, sigma, length_scale, period),
            KernelSpec::Ou {
                sigma,
                length_scale,
            } => ou_raw(t - t2, sigma, length_scale),
            KernelSpec::CausalForce {
                length_scale,
                mark_time,
            } => causal_raw(t, t2, mark_time, length_scale),
        }
    }
}

#[inline]
pub(crate) fn se_raw(r: f64, sigma: f64, ell: f64) -> f64 {
    sigma * sigma * (-r * r / (2.0 * ell * ell)).exp()
}

#[inline]
pub(crate) fn periodic_raw(r: f64, sigma: f64, ell: f64, period: f64) -> f64 {
    let s = (PI * r.abs() / period).sin();
    sigma * sigma * (-s * s / (2.0 * ell * ell)).exp()
}

#[inline]
pub(crate) fn ou_raw(r: f64, sigma: f64, ell: f64) -> f64 {
    sigma * sigma * (-r.abs() / ell).exp()
}

/// The clipping warp `h(x) = x 1(x > 0)`.
#[inline]
pub fn clip(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn causal_raw(t: f64, t2: f64, mark: f64, ell: f64) -> f64 {
    let w = clip(t - mark) - clip(t2 - mark);
    (-(w * w) / (ell * ell)).exp()
}

pub fn se_kernel(t: f64, t2: f64, sigma: f64, ell: f64) -> Result<f64> {
    ensure_positive("sigma", sigma)?;
    ensure_positive("length_scale", ell)?;
    Ok(se_raw(t - t2, sigma, ell))
}

pub fn periodic_kernel(t: f64, t2: f64, sigma: f64, ell: f64, period: f64) -> Result<f64> {
    ensure_positive("sigma", sigma)?;
    ensure_positive("length_scale", ell)?;
    ensure_positive("period", period)?;
    Ok(periodic_raw(t - t2, sigma, ell, period))
}

pub fn ou_kernel(t: f64, t2: f64, sigma: f64, ell: f64) -> Result<f64> {
    ensure_positive("sigma", sigma)?;
    ensure_positive("length_scale", ell)?;
    Ok(ou_raw(t - t2, sigma, ell))
}

/// Causal time-marked kernel `exp(-[h(t - t_m) - h(t2 - t_m)]^2 / ell^2)`.
///
/// Equal to 1 whenever both inputs are at or before `mark`.
pub fn causal_force_kernel(t: f64, t2: f64, mark: f64, ell: f64) -> Result<f64> {
    ensure_finite("mark", mark)?;
    ensure_positive("length_scale", ell)?;
    Ok(causal_raw(t, t2, mark, ell))
}

/// Force prior covariance under the chosen convention.
#[inline]
pub fn force_prior_cov(t: f64, t2: f64, mark: f64, ell: f64, convention: ForceConvention) -> f64 {
    match convention {
        ForceConvention::Unzeroed => causal_raw(t, t2, mark, ell),
        ForceConvention::Zeroed => {
            if t > mark && t2 > mark {
                causal_raw(t, t2, mark, ell)
            } else {
                0.0
            }
        }
    }
}

/// Gram matrix with entry `(i, j) = k(times_a[i], times_b[j])`.
pub fn gram(spec: &KernelSpec, times_a: &[f64], times_b: &[f64]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    for (i, &t) in times_a.iter().chain(times_b).enumerate() {
        ensure_finite(&format!("time[{i}]"), t)?;
    }
    Ok(DMatrix::from_fn(times_a.len(), times_b.len(), |i, j| {
        spec.eval(times_a[i], times_b[j])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    const TOL: f64 = 1e-12;

    #[test]
    fn se_examples() {
        assert_eq!(se_kernel(0.0, 0.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((se_kernel(1.0, 0.0, 1.0, 1.0).unwrap() - (-0.5f64).exp()).abs() < TOL);
        assert_eq!(se_kernel(0.0, 0.0, 2.0, 0.5).unwrap(), 4.0);
    }

    #[test]
    fn periodic_examples() {
        assert_eq!(periodic_kernel(0.0, 0.0, 1.0, 1.0, 24.0).unwrap(), 1.0);
        assert!((periodic_kernel(24.0, 0.0, 1.0, 1.0, 24.0).unwrap() - 1.0).abs() < TOL);
        let half = periodic_kernel(12.0, 0.0, 1.0, 1.0, 24.0).unwrap();
        assert!((half - 0.606_531).abs() < 1e-6);
        assert!((half - (-0.5f64).exp()).abs() < TOL);
    }

    #[test]
    fn ou_examples() {
        assert_eq!(ou_kernel(0.0, 0.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((ou_kernel(1.0, 0.0, 1.0, 1.0).unwrap() - 0.367_879).abs() < 1e-6);
        assert!((ou_kernel(2.0, 0.0, 3.0, 2.0).unwrap() - 9.0 * (-1.0f64).exp()).abs() < TOL);
        assert!((ou_kernel(2.0, 0.0, 3.0, 2.0).unwrap() - 3.310_915).abs() < 1e-6);
    }

    #[test]
    fn causal_examples() {
        let tm = 3.7;
        assert_eq!(causal_force_kernel(tm - 1.0, tm - 2.0, tm, 1.0).unwrap(), 1.0);
        assert_eq!(causal_force_kernel(tm + 2.0, tm + 2.0, tm, 0.5).unwrap(), 1.0);
        let v = causal_force_kernel(tm - 1.0, tm + 1.0, tm, 1.0).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < TOL);
    }

    #[test]
    fn clip_is_strict_at_zero() {
        assert_eq!(clip(0.0), 0.0);
        assert_eq!(clip(-0.0), 0.0);
        assert_eq!(clip(1e-300), 1e-300);
        // At exactly the mark the warped input is 0, like any earlier time.
        assert_eq!(causal_force_kernel(2.0, 1.0, 2.0, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn zeroed_prior_vanishes_before_mark() {
        assert_eq!(force_prior_cov(0.5, 3.0, 1.0, 1.0, ForceConvention::Zeroed), 0.0);
        assert_eq!(force_prior_cov(1.0, 1.0, 1.0, 1.0, ForceConvention::Zeroed), 0.0);
        assert_eq!(force_prior_cov(1.5, 1.5, 1.0, 1.0, ForceConvention::Zeroed), 1.0);
        assert_eq!(force_prior_cov(0.5, 0.2, 1.0, 1.0, ForceConvention::Unzeroed), 1.0);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(se_kernel(0.0, 0.0, 0.0, 1.0), Err(Error::ParameterDomain(_))));
        assert!(matches!(se_kernel(0.0, 0.0, 1.0, -1.0), Err(Error::ParameterDomain(_))));
        assert!(periodic_kernel(0.0, 0.0, 1.0, 1.0, 0.0).is_err());
        assert!(ou_kernel(0.0, 0.0, 1.0, f64::NAN).is_err());
        assert!(causal_force_kernel(0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn gram_examples() {
        let se = KernelSpec::Se {
            sigma: 1.5,
            length_scale: 2.0,
        };
        let g = gram(&se, &[0.0], &[0.0]).unwrap();
        assert_eq!(g[(0, 0)], 2.25);

        let se1 = KernelSpec::Se {
            sigma: 1.0,
            length_scale: 1.0,
        };
        let g = gram(&se1, &[0.0, 1.0], &[0.0]).unwrap();
        assert_eq!(g.shape(), (2, 1));
        assert_eq!(g[(0, 0)], 1.0);
        assert!((g[(1, 0)] - (-0.5f64).exp()).abs() < TOL);

        let t = [0.0, 1.0, 2.0];
        for spec in [
            se1,
            KernelSpec::Periodic {
                sigma: 1.0,
                length_scale: 0.7,
                period: 5.0,
            },
            KernelSpec::Ou {
                sigma: 2.0,
                length_scale: 0.4,
            },
            KernelSpec::CausalForce {
                length_scale: 1.0,
                mark_time: 0.5,
            },
        ] {
            let g = gram(&spec, &t, &t).unwrap();
            assert_eq!(g, g.transpose());
        }
    }

    #[test]
    fn gram_rejects_non_finite_times() {
        let se = KernelSpec::Se {
            sigma: 1.0,
            length_scale: 1.0,
        };
        assert!(matches!(gram(&se, &[0.0, f64::NAN], &[0.0]), Err(Error::Input(_))));
        assert!(gram(&se, &[0.0], &[f64::INFINITY]).is_err());
    }
}
