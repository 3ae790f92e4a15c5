//! Covariances induced by the first-order latent force model
//!
//! ```text
//! d mu(t)/dt + D mu(t) = B + sum_m S_m f_m(t; t_m),   mu(t) = B/D + sum_m S_m e^{-D t} int_0^t e^{D tau} f_m(tau) d tau
//! ```
//!
//! with each force `f_m` a zero-mean GP under the causal kernel anchored at
//! `t_m`. The integral starts at the time origin 0, so output times must be
//! nonnegative; mark times may be negative (a treatment given before the
//! first observation).
//!
//! Every closed form splits the integration domain at `c = max(t_m, 0)`.
//! Before `c` the warped input is 0 and the kernel is constant in that
//! argument; after `c` the kernel is a Gaussian bump in the integration
//! variable. Under [`ForceConvention::Zeroed`] the pre-mark pieces vanish.
//! The post/post block of the output covariance is the classic
//! first-order-ODE SE kernel with both time axes shifted by `c`.
//!
//! All `exp(nu^2) * erf(...)` products go through
//! [`special::exp_erf_diff`](crate::special::exp_erf_diff) so large
//! `nu = ell D / 2` neither overflows nor cancels.

mod quadrature;

pub use quadrature::{integrate_adaptive, quadrature_cov_output, quadrature_cross_cov, Integral};

use serde::{Deserialize, Serialize};

use crate::dual::{Dual, Real};
use crate::error::{ensure_finite, ensure_positive, Error, Result};
use crate::kernel::{clip, ForceConvention};
use crate::special::{exp_erf_diff_generic, SQRT_PI};

/// Dynamics of one covariate and its coupling to every treatment force.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LfmParams {
    /// Baseline drive `B`.
    pub b: f64,
    /// Decay rate `D > 0` (per hour).
    pub d: f64,
    /// Effect sizes `S_m`, one per treatment.
    pub s: Vec<f64>,
    /// Force length-scales `ell_m` (hours).
    pub ell: Vec<f64>,
    /// Mark times `t_m` (hours).
    pub t_marks: Vec<f64>,
}

impl LfmParams {
    pub fn validate(&self) -> Result<()> {
        ensure_finite("B", self.b)?;
        ensure_positive("D", self.d)?;
        if self.s.len() != self.ell.len() || self.s.len() != self.t_marks.len() {
            return Err(Error::ParameterDomain(format!(
                "S, ell and t_marks must have equal length (got {}, {}, {})",
                self.s.len(),
                self.ell.len(),
                self.t_marks.len()
            )));
        }
        for (m, ((&s, &l), &tm)) in self.s.iter().zip(&self.ell).zip(&self.t_marks).enumerate() {
            ensure_finite(&format!("S[{m}]"), s)?;
            ensure_positive(&format!("ell[{m}]"), l)?;
            ensure_finite(&format!("t_marks[{m}]"), tm)?;
        }
        Ok(())
    }

    pub fn n_treatments(&self) -> usize {
        self.s.len()
    }

    /// `nu = ell_m D / 2` for treatment `m`.
    pub fn nu(&self, m: usize) -> f64 {
        self.ell[m] * self.d / 2.0
    }
}

/// Expected output `B / D`; the zero-mean forces contribute nothing.
pub fn lfm_mean(_t: f64, b: f64, d: f64) -> Result<f64> {
    ensure_finite("B", b)?;
    ensure_positive("D", d)?;
    Ok(b / d)
}

fn check_output_time(t: f64) -> Result<()> {
    ensure_finite("output time", t)?;
    if t < 0.0 {
        return Err(Error::ParameterDomain(format!(
            "output time {t} precedes the time origin 0"
        )));
    }
    Ok(())
}

/// `Cov(mu(t), f_m(t2))`: output time `t`, force time `t2`.
pub fn cross_cov_force_output(
    t: f64,
    t2: f64,
    m: usize,
    params: &LfmParams,
    convention: ForceConvention,
) -> Result<f64> {
    params.validate()?;
    check_output_time(t)?;
    ensure_finite("force time", t2)?;
    if m >= params.n_treatments() {
        return Err(Error::Input(format!(
            "treatment index {m} out of range ({} treatments)",
            params.n_treatments()
        )));
    }
    let unit = unit_cross_cov(t, t2, params.t_marks[m], params.d, params.ell[m], convention);
    Ok(params.s[m] * unit)
}

/// `Cov(mu_a(t), mu_b(t2))` summed over the treatments whose forces both
/// covariates share.
pub fn cov_output_output(
    t: f64,
    t2: f64,
    params_a: &LfmParams,
    params_b: &LfmParams,
    shared: &[usize],
    convention: ForceConvention,
) -> Result<f64> {
    params_a.validate()?;
    params_b.validate()?;
    check_output_time(t)?;
    check_output_time(t2)?;
    check_shared(params_a, params_b, shared)?;
    Ok(shared
        .iter()
        .map(|&m| {
            params_a.s[m]
                * params_b.s[m]
                * unit_output_cov(
                    t,
                    t2,
                    params_a.t_marks[m],
                    params_a.d,
                    params_b.d,
                    params_a.ell[m],
                    convention,
                )
        })
        .sum())
}

pub(crate) fn check_shared(a: &LfmParams, b: &LfmParams, shared: &[usize]) -> Result<()> {
    for &m in shared {
        if m >= a.n_treatments() || m >= b.n_treatments() {
            return Err(Error::Input(format!("shared treatment index {m} out of range")));
        }
        if a.ell[m] != b.ell[m] || a.t_marks[m] != b.t_marks[m] {
            return Err(Error::Consistency(format!(
                "treatment {m}: force hyperparameters differ between covariates \
                 (ell {} vs {}, t_m {} vs {})",
                a.ell[m], b.ell[m], a.t_marks[m], b.t_marks[m]
            )));
        }
    }
    Ok(())
}

/// Unit-effect cross-covariance `e^{-D t} int_0^t e^{D tau} k(tau, s) d tau`.
pub fn unit_cross_cov(t: f64, s: f64, mark: f64, d: f64, ell: f64, convention: ForceConvention) -> f64 {
    cross_generic(t, s, mark, d, ell, convention)
}

/// Unit-effect output covariance between covariates with decays `da`, `db`
/// through one force.
pub fn unit_output_cov(
    t: f64,
    t2: f64,
    mark: f64,
    da: f64,
    db: f64,
    ell: f64,
    convention: ForceConvention,
) -> f64 {
    output_generic(t, t2, mark, da, db, ell, convention)
}

/// [`unit_output_cov`] with its partial derivatives in `(da, db, ell)`.
pub(crate) fn unit_output_cov_grad(
    t: f64,
    t2: f64,
    mark: f64,
    da: f64,
    db: f64,
    ell: f64,
    convention: ForceConvention,
) -> (f64, [f64; 3]) {
    let r = output_generic(
        t,
        t2,
        mark,
        Dual::<3>::var(da, 0),
        Dual::<3>::var(db, 1),
        Dual::<3>::var(ell, 2),
        convention,
    );
    (r.v, r.d)
}

/// `e^{-D t} int_0^c e^{D tau} d tau` for `0 < c <= t`.
#[inline]
fn exp_window<T: Real>(t: f64, c: f64, d: T) -> T {
    if c <= 0.0 {
        return T::cst(0.0);
    }
    (d * (c - t)).exp() * -(d * -c).expm1() / d
}

/// `e^{-D t} int_lo^t e^{D tau} exp(-(tau - p)^2 / ell^2) d tau`.
#[inline]
fn gauss_conv<T: Real>(t: f64, lo: f64, p: f64, d: T, ell: T) -> T {
    if t <= lo {
        return T::cst(0.0);
    }
    let nu = ell * d * 0.5;
    let u1 = T::cst(t - p) / ell;
    let u0 = T::cst(lo - p) / ell;
    ell * (0.5 * SQRT_PI) * exp_erf_diff_generic(-(d * (t - p)), nu, u0, u1)
}

fn cross_generic<T: Real>(t: f64, s: f64, mark: f64, d: T, ell: T, convention: ForceConvention) -> T {
    if convention == ForceConvention::Zeroed && s <= mark {
        return T::cst(0.0);
    }
    let warped = clip(s - mark);
    let c = mark.max(0.0);
    let mut v = T::cst(0.0);
    if convention == ForceConvention::Unzeroed {
        let pre = mark.min(t);
        if pre > 0.0 {
            let z = T::cst(warped) / ell;
            v = v + (-(z * z)).exp() * exp_window(t, pre, d);
        }
    }
    if t > c {
        v = v + gauss_conv(t, c, mark + warped, d, ell);
    }
    v
}

/// One half of the shifted first-order-ODE SE kernel.
fn half_kernel<T: Real>(da: T, db: T, t: f64, t2: f64, ell: T) -> T {
    let nu = ell * da * 0.5;
    let first = exp_erf_diff_generic(-(da * (t - t2)), nu, -(T::cst(t2) / ell), T::cst(t - t2) / ell);
    let second = exp_erf_diff_generic(-(da * t) - db * t2, nu, T::cst(0.0), T::cst(t) / ell);
    (first - second) / (da + db)
}

/// `e^{-Da T - Db T2} int_0^T int_0^T2 e^{Da s + Db s'} exp(-(s - s')^2 / ell^2) ds' ds`.
fn shifted_se_kernel<T: Real>(t: f64, t2: f64, da: T, db: T, ell: T) -> T {
    ell * (0.5 * SQRT_PI) * (half_kernel(db, da, t2, t, ell) + half_kernel(da, db, t, t2, ell))
}

fn output_generic<T: Real>(
    t: f64,
    t2: f64,
    mark: f64,
    da: T,
    db: T,
    ell: T,
    convention: ForceConvention,
) -> T {
    let c = mark.max(0.0);
    let mut v = T::cst(0.0);
    if t > c && t2 > c {
        v = shifted_se_kernel(t - c, t2 - c, da, db, ell);
    }
    if convention == ForceConvention::Unzeroed {
        let wa = exp_window(t, mark.min(t), da);
        let wb = exp_window(t2, mark.min(t2), db);
        v = v + wa * wb;
        if t2 > c {
            v = v + wa * gauss_conv(t2, c, mark, db, ell);
        }
        if t > c {
            v = v + gauss_conv(t, c, mark, da, ell) * wb;
        }
    }
    v
}
