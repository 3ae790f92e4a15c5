//! Numerical ground truth for the closed-form latent-force covariances.
//!
//! The integrands are built from [`force_prior_cov`] directly and never touch
//! the erf-based expressions, so agreement between the two is a real check.

use std::cell::RefCell;

use crate::error::{ensure_finite, ensure_positive, Error, Result};
use crate::kernel::{clip, force_prior_cov, ForceConvention};

use super::{check_shared, LfmParams};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_INTERVALS: usize = 20_000;

#[derive(Clone, Copy, Debug)]
pub struct Integral {
    pub value: f64,
    /// Sum of per-interval |K15 - G7| estimates.
    pub error: f64,
    pub intervals: usize,
}

fn gk15(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Globally adaptive Gauss-Kronrod 7/15 quadrature over `[breaks[0], breaks.last()]`.
///
/// `breaks` are kinks of the integrand; every initial panel is further cut so
/// no panel is wider than `max_width`. Refinement bisects the panel with the
/// largest error estimate until the summed estimate is at most `tol`.
pub fn integrate_adaptive(
    mut f: impl FnMut(f64) -> f64,
    breaks: &[f64],
    max_width: f64,
    tol: f64,
) -> Result<Integral> {
    ensure_positive("tolerance", tol)?;
    ensure_positive("max_width", max_width)?;
    let mut points: Vec<f64> = breaks.iter().copied().filter(|x| x.is_finite()).collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    if points.len() < 2 {
        return Ok(Integral {
            value: 0.0,
            error: 0.0,
            intervals: 0,
        });
    }

    // (a, b, value, error)
    let mut panels: Vec<(f64, f64, f64, f64)> = Vec::new();
    for w in points.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let pieces = ((hi - lo) / max_width).ceil().max(1.0) as usize;
        let step = (hi - lo) / pieces as f64;
        for k in 0..pieces {
            let a = lo + step * k as f64;
            let b = if k + 1 == pieces { hi } else { a + step };
            let (v, e) = gk15(&mut f, a, b);
            panels.push((a, b, v, e));
        }
    }

    loop {
        let total_err: f64 = panels.iter().map(|p| p.3).sum();
        if total_err <= tol {
            break;
        }
        if panels.len() >= MAX_INTERVALS {
            return Err(Error::numerical(
                "adaptive quadrature did not converge",
                format!(
                    "estimated error {total_err:e} > tolerance {tol:e} after {} panels on [{}, {}]",
                    panels.len(),
                    points[0],
                    points[points.len() - 1]
                ),
            ));
        }
        let (worst, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("nonempty");
        let (a, b, _, _) = panels.swap_remove(worst);
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            return Err(Error::numerical(
                "adaptive quadrature hit floating-point resolution",
                format!("panel [{a}, {b}] cannot be bisected; estimated error {total_err:e}"),
            ));
        }
        let (v1, e1) = gk15(&mut f, a, mid);
        let (v2, e2) = gk15(&mut f, mid, b);
        panels.push((a, mid, v1, e1));
        panels.push((mid, b, v2, e2));
    }

    let mut sorted = panels.clone();
    sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
    Ok(Integral {
        value: sorted.iter().map(|p| p.2).sum(),
        error: sorted.iter().map(|p| p.3).sum(),
        intervals: sorted.len(),
    })
}

/// Unit-effect cross-covariance integral for one force, absolute tolerance `tol`.
fn unit_cross_integral(
    t: f64,
    s: f64,
    mark: f64,
    d: f64,
    ell: f64,
    convention: ForceConvention,
    tol: f64,
) -> Result<f64> {
    if t <= 0.0 {
        return Ok(0.0);
    }
    let centre = mark + clip(s - mark);
    let breaks = [0.0, mark.clamp(0.0, t), centre.clamp(0.0, t), t];
    let width = ell.min(2.0 / d);
    let r = integrate_adaptive(
        |tau| (-d * (t - tau)).exp() * force_prior_cov(tau, s, mark, ell, convention),
        &breaks,
        width,
        tol,
    )?;
    Ok(r.value)
}

/// Quadrature of `S_m e^{-D t} int_0^t e^{D tau} k(tau, t2; t_m) d tau` to absolute error `tol`.
pub fn quadrature_cross_cov(
    t: f64,
    t2: f64,
    m: usize,
    params: &LfmParams,
    tol: f64,
    convention: ForceConvention,
) -> Result<f64> {
    params.validate()?;
    ensure_positive("tolerance", tol)?;
    ensure_finite("output time", t)?;
    ensure_finite("force time", t2)?;
    if t < 0.0 {
        return Err(Error::ParameterDomain(format!("output time {t} precedes the time origin 0")));
    }
    if m >= params.n_treatments() {
        return Err(Error::Input(format!("treatment index {m} out of range")));
    }
    let s = params.s[m];
    if s == 0.0 || t == 0.0 {
        return Ok(0.0);
    }
    let unit = unit_cross_integral(
        t,
        t2,
        params.t_marks[m],
        params.d,
        params.ell[m],
        convention,
        tol / s.abs(),
    )?;
    Ok(s * unit)
}

#[allow(clippy::too_many_arguments)]
fn unit_output_integral(
    t: f64,
    t2: f64,
    mark: f64,
    da: f64,
    db: f64,
    ell: f64,
    convention: ForceConvention,
    tol: f64,
) -> Result<f64> {
    if t <= 0.0 || t2 <= 0.0 {
        return Ok(0.0);
    }
    let inner_tol = tol / (2.0 * t.max(1.0));
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    let inner = |tau: f64| -> f64 {
        let centre = mark + clip(tau - mark);
        let breaks = [0.0, mark.clamp(0.0, t2), centre.clamp(0.0, t2), t2];
        match integrate_adaptive(
            |tau2| (-db * (t2 - tau2)).exp() * force_prior_cov(tau, tau2, mark, ell, convention),
            &breaks,
            ell.min(2.0 / db),
            inner_tol,
        ) {
            Ok(r) => r.value,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                0.0
            }
        }
    };
    let breaks = [0.0, mark.clamp(0.0, t), t];
    let outer = integrate_adaptive(
        |tau| (-da * (t - tau)).exp() * inner(tau),
        &breaks,
        ell.min(2.0 / da),
        tol / 2.0,
    )?;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(outer.value)
}

/// Tensor-product adaptive quadrature of the output/output covariance, absolute tolerance `tol`.
pub fn quadrature_cov_output(
    t: f64,
    t2: f64,
    params_a: &LfmParams,
    params_b: &LfmParams,
    shared: &[usize],
    tol: f64,
    convention: ForceConvention,
) -> Result<f64> {
    params_a.validate()?;
    params_b.validate()?;
    ensure_positive("tolerance", tol)?;
    for &x in &[t, t2] {
        ensure_finite("output time", x)?;
        if x < 0.0 {
            return Err(Error::ParameterDomain(format!("output time {x} precedes the time origin 0")));
        }
    }
    check_shared(params_a, params_b, shared)?;
    let per_force = tol / shared.len().max(1) as f64;
    let mut total = 0.0;
    for &m in shared {
        let scale = params_a.s[m] * params_b.s[m];
        if scale == 0.0 {
            continue;
        }
        let unit = unit_output_integral(
            t,
            t2,
            params_a.t_marks[m],
            params_a.d,
            params_b.d,
            params_a.ell[m],
            convention,
            per_force / scale.abs(),
        )?;
        total += scale * unit;
    }
    Ok(total)
}
