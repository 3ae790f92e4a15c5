//! Joint GP over all covariates of one patient.
//!
//! Each covariate's observed process is the stationary baseline (SE plus
//! optional periodic) plus the latent-force output, plus i.i.d. noise.
//! Baseline terms only couple observations of the same covariate; the
//! latent-force terms couple every pair of covariates through the shared
//! treatment forces. Distinct treatment administrations drive independent
//! forces.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_positive, Error, Result};
use crate::kernel::{force_prior_cov, periodic_raw, se_raw, ForceConvention};
use crate::lfm::{unit_cross_cov, unit_output_cov, LfmParams};

/// Relative jitter ceiling; factorization gives up beyond `1e-4 * max diag`.
pub const MAX_RELATIVE_JITTER: f64 = 1e-4;
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-8;

/// Orientation window for the force sign convention, in force length-scales.
pub const ORIENTATION_WINDOW: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicTerm {
    pub sigma: f64,
    pub length_scale: f64,
    pub period: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateModel {
    pub name: String,
    pub se_sigma: f64,
    pub se_length_scale: f64,
    /// `None` disables the periodic component.
    pub periodic: Option<PeriodicTerm>,
    pub noise_var: f64,
    /// Baseline drive `B`.
    pub b: f64,
    /// Decay `D`.
    pub d: f64,
    /// Effect size of each treatment administration on this covariate.
    pub effects: Vec<f64>,
}

impl CovariateModel {
    #[inline]
    pub fn baseline_cov(&self, t: f64, t2: f64) -> f64 {
        let r = t - t2;
        let mut k = se_raw(r, self.se_sigma, self.se_length_scale);
        if let Some(p) = &self.periodic {
            k += periodic_raw(r, p.sigma, p.length_scale, p.period);
        }
        k
    }

    pub fn mean(&self) -> f64 {
        self.b / self.d
    }
}

/// One treatment administration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Treatment {
    pub type_id: String,
    /// Mark time `t_m` (hours).
    pub time: f64,
    /// Force length-scale, shared by administrations of the same type.
    pub length_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub covariates: Vec<CovariateModel>,
    pub treatments: Vec<Treatment>,
    /// Starting relative jitter (fraction of the largest diagonal entry).
    pub jitter: f64,
    pub convention: ForceConvention,
}

/// Observations of one covariate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Self {
        Series { times, values }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Posterior of one latent force and the effect it induces on each covariate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentForcePosterior {
    pub force: Posterior,
    /// `S_{j,m}` times the convolved force, per covariate.
    pub effects: Vec<Posterior>,
}

/// A Cholesky factor plus the absolute jitter that made it succeed.
pub(crate) struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
    /// Index and value of the largest diagonal entry the jitter was scaled by.
    top: Option<(usize, f64)>,
}

impl Factor {
    pub fn max_diagonal(&self) -> Option<(usize, f64)> {
        self.top
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Cholesky with deterministic jitter escalation: start at `rel_jitter * max
/// diag`, multiply by 10 until `MAX_RELATIVE_JITTER * max diag`.
pub(crate) fn factorize(k: &DMatrix<f64>, rel_jitter: f64) -> Result<Factor> {
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(
            "covariance contains non-finite entries",
            format!("{}x{} matrix", k.nrows(), k.ncols()),
        ));
    }
    let top = k
        .diagonal()
        .iter()
        .map(|v| v.abs())
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, m)) if m >= v => best,
            _ => Some((i, v)),
        })
        .filter(|&(_, v)| v >= f64::MIN_POSITIVE);
    let max_diag = top.map_or(f64::MIN_POSITIVE, |(_, v)| v);
    let mut rel = rel_jitter;
    loop {
        let mut m = k.clone();
        let jitter = rel * max_diag;
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = m.cholesky() {
            return Ok(Factor { chol, jitter, top });
        }
        if rel >= MAX_RELATIVE_JITTER * (1.0 - 1e-9) {
            let min_diag = k.diagonal().iter().fold(f64::INFINITY, |m, &v| m.min(v));
            return Err(Error::numerical(
                "covariance not positive definite after jitter escalation",
                format!(
                    "n = {}, max diag = {max_diag:e}, min diag = {min_diag:e}, final jitter = {jitter:e}",
                    k.nrows()
                ),
            ));
        }
        rel = (rel * 10.0).min(MAX_RELATIVE_JITTER);
    }
}

/// Negative log density of `y ~ N(mean, k)` with its factor and `alpha = K^-1 (y - mean)`.
pub(crate) fn gaussian_nll(
    k: &DMatrix<f64>,
    mean: &DVector<f64>,
    y: &DVector<f64>,
    rel_jitter: f64,
) -> Result<(f64, Factor, DVector<f64>)> {
    let factor = factorize(k, rel_jitter)?;
    let r = y - mean;
    let alpha = factor.chol.solve(&r);
    let n = y.len() as f64;
    let nll = 0.5 * r.dot(&alpha) + 0.5 * factor.log_det() + 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    Ok((nll, factor, alpha))
}

/// Condition on training data: `cross` is `n x q` (train by query).
pub(crate) fn condition(
    factor: &Factor,
    alpha: &DVector<f64>,
    cross: &DMatrix<f64>,
    prior_mean: &[f64],
    prior_var: &[f64],
    times: &[f64],
) -> Result<Posterior> {
    let mean_shift = cross.transpose() * alpha;
    let v = factor
        .chol
        .l_dirty()
        .solve_lower_triangular(cross)
        .ok_or_else(|| Error::numerical("triangular solve failed", "singular factor"))?;
    let mut mean = Vec::with_capacity(times.len());
    let mut variance = Vec::with_capacity(times.len());
    for q in 0..times.len() {
        mean.push(prior_mean[q] + mean_shift[q]);
        let reduction: f64 = v.column(q).iter().map(|x| x * x).sum();
        let var = prior_var[q] - reduction;
        let slack = 1e-10 * prior_var[q].abs().max(1.0);
        if var < -slack {
            return Err(Error::numerical(
                "negative posterior variance",
                format!("query time {}: prior {} minus reduction {} = {var:e}", times[q], prior_var[q], reduction),
            ));
        }
        variance.push(var.max(0.0));
    }
    Ok(Posterior {
        times: times.to_vec(),
        mean,
        variance,
    })
}

impl GpModel {
    pub fn validate(&self) -> Result<()> {
        ensure_positive("jitter", self.jitter)?;
        let m = self.treatments.len();
        for (i, t) in self.treatments.iter().enumerate() {
            ensure_finite(&format!("treatment[{i}].time"), t.time)?;
            ensure_positive(&format!("treatment[{i}].length_scale"), t.length_scale)?;
        }
        for c in &self.covariates {
            ensure_positive(&format!("{}: se_sigma", c.name), c.se_sigma)?;
            ensure_positive(&format!("{}: se_length_scale", c.name), c.se_length_scale)?;
            if let Some(p) = &c.periodic {
                ensure_positive(&format!("{}: periodic sigma", c.name), p.sigma)?;
                ensure_positive(&format!("{}: periodic length_scale", c.name), p.length_scale)?;
                ensure_positive(&format!("{}: period", c.name), p.period)?;
            }
            ensure_positive(&format!("{}: noise_var", c.name), c.noise_var)?;
            ensure_finite(&format!("{}: B", c.name), c.b)?;
            ensure_positive(&format!("{}: D", c.name), c.d)?;
            if c.effects.len() != m {
                return Err(Error::Consistency(format!(
                    "{}: {} effect sizes for {m} treatments",
                    c.name,
                    c.effects.len()
                )));
            }
            for (k, s) in c.effects.iter().enumerate() {
                ensure_finite(&format!("{}: S[{k}]", c.name), *s)?;
            }
        }
        Ok(())
    }

    pub fn lfm_params(&self, j: usize) -> LfmParams {
        let c = &self.covariates[j];
        LfmParams {
            b: c.b,
            d: c.d,
            s: c.effects.clone(),
            ell: self.treatments.iter().map(|t| t.length_scale).collect(),
            t_marks: self.treatments.iter().map(|t| t.time).collect(),
        }
    }

    /// Latent-force part of `Cov(y_a(t), y_b(t2))`.
    pub fn lfm_cov(&self, a: usize, b: usize, t: f64, t2: f64) -> f64 {
        let ca = &self.covariates[a];
        let cb = &self.covariates[b];
        let mut k = 0.0;
        for (m, tr) in self.treatments.iter().enumerate() {
            let s = ca.effects[m] * cb.effects[m];
            if s != 0.0 {
                k += s * unit_output_cov(t, t2, tr.time, ca.d, cb.d, tr.length_scale, self.convention);
            }
        }
        k
    }

    /// Noise-free `Cov(f_a(t), f_b(t2))`.
    pub fn signal_cov(&self, a: usize, b: usize, t: f64, t2: f64) -> f64 {
        let mut k = self.lfm_cov(a, b, t, t2);
        if a == b {
            k += self.covariates[a].baseline_cov(t, t2);
        }
        k
    }

    fn check_times(&self, times: &[&[f64]]) -> Result<()> {
        if times.len() != self.covariates.len() {
            return Err(Error::Input(format!(
                "{} time sequences for {} covariates",
                times.len(),
                self.covariates.len()
            )));
        }
        for (j, ts) in times.iter().enumerate() {
            for (i, &t) in ts.iter().enumerate() {
                ensure_finite(&format!("covariate {j} time[{i}]"), t)?;
                if t < 0.0 {
                    return Err(Error::ParameterDomain(format!(
                        "covariate {j} time[{i}] = {t} precedes the time origin 0 (rebase the record first)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Prior covariance over the concatenated per-covariate times, optionally
    /// with observation noise on the diagonal. No jitter.
    pub fn prior_covariance(&self, times: &[&[f64]], include_noise: bool) -> Result<DMatrix<f64>> {
        self.validate()?;
        self.check_times(times)?;
        let index: Vec<(usize, f64)> = times
            .iter()
            .enumerate()
            .flat_map(|(j, ts)| ts.iter().map(move |&t| (j, t)))
            .collect();
        let n = index.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            let (a, t) = index[i];
            for j in i..n {
                let (b, t2) = index[j];
                let v = self.signal_cov(a, b, t, t2);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            if include_noise {
                k[(i, i)] += self.covariates[a].noise_var;
            }
        }
        Ok(k)
    }

    fn stack<'a>(&self, data: &'a [Series]) -> Result<(Vec<&'a [f64]>, DVector<f64>, DVector<f64>)> {
        if data.len() != self.covariates.len() {
            return Err(Error::Input(format!(
                "{} observation series for {} covariates",
                data.len(),
                self.covariates.len()
            )));
        }
        let mut y = Vec::new();
        let mut mu = Vec::new();
        for (j, s) in data.iter().enumerate() {
            if s.times.len() != s.values.len() {
                return Err(Error::Input(format!("covariate {j}: times and values differ in length")));
            }
            for (i, &v) in s.values.iter().enumerate() {
                ensure_finite(&format!("covariate {j} value[{i}]"), v)?;
            }
            y.extend_from_slice(&s.values);
            mu.extend(std::iter::repeat_n(self.covariates[j].mean(), s.len()));
        }
        if y.is_empty() {
            return Err(Error::Input("at least one observation is required".into()));
        }
        let times = data.iter().map(|s| s.times.as_slice()).collect();
        Ok((times, DVector::from_vec(y), DVector::from_vec(mu)))
    }

    pub(crate) fn fit_data(&self, data: &[Series]) -> Result<(f64, Factor, DVector<f64>)> {
        let (times, y, mu) = self.stack(data)?;
        let k = self.prior_covariance(&times, true)?;
        gaussian_nll(&k, &mu, &y, self.jitter)
    }

    /// Orient each treatment type so its posterior-mean unit response on the
    /// first covariate is positive on average over `(t_m, t_m + 4 ell_m]`.
    ///
    /// The likelihood is invariant to flipping the sign of every effect size
    /// of a treatment type together with its forces, so this only fixes the
    /// reported sign of `S`.
    pub fn orient_forces(&mut self, train: &[Series]) -> Result<()> {
        if self.treatments.is_empty() || self.covariates.is_empty() {
            return Ok(());
        }
        let (_, _, alpha) = self.fit_data(train)?;
        let index: Vec<(usize, f64)> = train
            .iter()
            .enumerate()
            .flat_map(|(j, s)| s.times.iter().map(move |&t| (j, t)))
            .collect();
        let d0 = self.covariates[0].d;
        let mut score: Vec<(String, f64)> = Vec::new();
        for (m, tr) in self.treatments.iter().enumerate() {
            let grid = orientation_grid(tr.time, tr.length_scale);
            let mut total = 0.0;
            for &s in &grid {
                let mut v = 0.0;
                for (i, &(a, t)) in index.iter().enumerate() {
                    let ca = &self.covariates[a];
                    v += ca.effects[m]
                        * unit_output_cov(s, t, tr.time, d0, ca.d, tr.length_scale, self.convention)
                        * alpha[i];
                }
                total += v;
            }
            match score.iter_mut().find(|(k, _)| *k == tr.type_id) {
                Some(entry) => entry.1 += total,
                None => score.push((tr.type_id.clone(), total)),
            }
        }
        for (type_id, total) in score {
            if total < 0.0 {
                for (m, tr) in self.treatments.iter().enumerate() {
                    if tr.type_id == type_id {
                        for c in &mut self.covariates {
                            c.effects[m] = -c.effects[m];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Grid over the orientation window, clipped to the time origin.
pub(crate) fn orientation_grid(mark: f64, ell: f64) -> Vec<f64> {
    const POINTS: usize = 64;
    let lo = mark;
    let hi = mark + ORIENTATION_WINDOW * ell;
    (1..=POINTS)
        .map(|k| lo + (hi - lo) * k as f64 / POINTS as f64)
        .filter(|&t| t >= 0.0)
        .collect()
}

/// Joint covariance of all observations including noise and the jitter that
/// the factorization needed.
pub fn assemble_covariance(model: &GpModel, times: &[&[f64]]) -> Result<DMatrix<f64>> {
    let mut k = model.prior_covariance(times, true)?;
    let factor = factorize(&k, model.jitter)?;
    for i in 0..k.nrows() {
        k[(i, i)] += factor.jitter;
    }
    Ok(k)
}

/// Exact log marginal likelihood via a Cholesky factorization.
pub fn log_marginal_likelihood(model: &GpModel, observations: &[Series]) -> Result<f64> {
    let (nll, _, _) = model.fit_data(observations)?;
    Ok(-nll)
}

/// Posterior of covariate `covariate` at `query_times`. With `with_noise`
/// the observation noise variance is added to the returned variance.
pub fn posterior_predict(
    model: &GpModel,
    train: &[Series],
    covariate: usize,
    query_times: &[f64],
    with_noise: bool,
) -> Result<Posterior> {
    if covariate >= model.covariates.len() {
        return Err(Error::Input(format!("covariate index {covariate} out of range")));
    }
    let (_, factor, alpha) = model.fit_data(train)?;
    let mut check: Vec<&[f64]> = vec![&[]; model.covariates.len()];
    check[covariate] = query_times;
    model.check_times(&check)?;

    let index: Vec<(usize, f64)> = train
        .iter()
        .enumerate()
        .flat_map(|(j, s)| s.times.iter().map(move |&t| (j, t)))
        .collect();
    let cross = DMatrix::from_fn(index.len(), query_times.len(), |i, q| {
        let (a, t) = index[i];
        model.signal_cov(a, covariate, t, query_times[q])
    });
    let c = &model.covariates[covariate];
    let prior_mean = vec![c.mean(); query_times.len()];
    let prior_var: Vec<f64> = query_times
        .iter()
        .map(|&t| model.signal_cov(covariate, covariate, t, t))
        .collect();
    let mut post = condition(&factor, &alpha, &cross, &prior_mean, &prior_var, query_times)?;
    if with_noise {
        for v in &mut post.variance {
            *v += c.noise_var;
        }
    }
    Ok(post)
}

/// Posterior of force `m` at `query_times` and of the effect it induces on
/// every covariate (`S_{j,m}` times the convolved force).
pub fn posterior_latent_force(
    model: &GpModel,
    train: &[Series],
    m: usize,
    query_times: &[f64],
) -> Result<LatentForcePosterior> {
    let tr = model
        .treatments
        .get(m)
        .ok_or_else(|| Error::Input(format!("treatment index {m} out of range")))?;
    let (_, factor, alpha) = model.fit_data(train)?;
    for (i, &t) in query_times.iter().enumerate() {
        ensure_finite(&format!("query time[{i}]"), t)?;
    }
    let index: Vec<(usize, f64)> = train
        .iter()
        .enumerate()
        .flat_map(|(j, s)| s.times.iter().map(move |&t| (j, t)))
        .collect();
    let q = query_times.len();

    let cross = DMatrix::from_fn(index.len(), q, |i, k| {
        let (a, t) = index[i];
        let ca = &model.covariates[a];
        ca.effects[m] * unit_cross_cov(t, query_times[k], tr.time, ca.d, tr.length_scale, model.convention)
    });
    let prior_var: Vec<f64> = query_times
        .iter()
        .map(|&s| force_prior_cov(s, s, tr.time, tr.length_scale, model.convention))
        .collect();
    let force = condition(&factor, &alpha, &cross, &vec![0.0; q], &prior_var, query_times)?;

    let mut effects = Vec::with_capacity(model.covariates.len());
    for cj in &model.covariates {
        // Effects live on output times, which start at the origin.
        let times: Vec<f64> = query_times.iter().map(|&s| s.max(0.0)).collect();
        let cross = DMatrix::from_fn(index.len(), q, |i, k| {
            let (a, t) = index[i];
            let ca = &model.covariates[a];
            cj.effects[m]
                * ca.effects[m]
                * unit_output_cov(times[k], t, tr.time, cj.d, ca.d, tr.length_scale, model.convention)
        });
        let prior_var: Vec<f64> = times
            .iter()
            .map(|&s| {
                cj.effects[m] * cj.effects[m] * unit_output_cov(s, s, tr.time, cj.d, cj.d, tr.length_scale, model.convention)
            })
            .collect();
        let mut post = condition(&factor, &alpha, &cross, &vec![0.0; q], &prior_var, &times)?;
        post.times = query_times.to_vec();
        effects.push(post);
    }
    Ok(LatentForcePosterior { force, effects })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn one_covariate(noise_var: f64) -> GpModel {
        GpModel {
            covariates: vec![CovariateModel {
                name: "x".into(),
                se_sigma: 1e-3,
                se_length_scale: 1.0,
                periodic: None,
                noise_var,
                b: 0.0,
                d: 1.0,
                effects: vec![],
            }],
            treatments: vec![],
            jitter: DEFAULT_RELATIVE_JITTER,
            convention: ForceConvention::Unzeroed,
        }
    }

    #[test]
    fn single_observation_likelihoods() {
        // total variance 1e-6 + (1 - 1e-6) = 1
        let model = one_covariate(1.0 - 1e-6);
        let y = [Series::new(vec![0.5], vec![0.0])];
        let lml = log_marginal_likelihood(&model, &y).unwrap();
        assert!((lml - (-0.918_939)).abs() < 1e-6);
        assert!((lml + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-7);

        let model = one_covariate(2.0 - 1e-6);
        let y = [Series::new(vec![0.5], vec![1.0])];
        let lml = log_marginal_likelihood(&model, &y).unwrap();
        let want = -0.25 - 0.5 * 2f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((want - (-1.515_513)).abs() < 1e-6);
        assert!((lml - want).abs() < 1e-7);
    }

    #[test]
    fn empty_observations_rejected() {
        let model = one_covariate(1.0);
        assert!(matches!(
            log_marginal_likelihood(&model, &[Series::default()]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn negative_times_rejected() {
        let model = one_covariate(1.0);
        let y = [Series::new(vec![-1.0], vec![0.0])];
        assert!(matches!(log_marginal_likelihood(&model, &y), Err(Error::ParameterDomain(_))));
    }

    #[test]
    fn jitter_escalation_rescues_rank_deficient_matrix() {
        let k = DMatrix::from_element(3, 3, 1.0);
        let f = factorize(&k, 1e-12).unwrap();
        assert!(f.jitter > 0.0 && f.jitter <= 1e-4);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(factorize(&bad, 1e-8), Err(Error::Numerical { .. })));
    }

    #[test]
    fn orientation_grid_starts_after_mark() {
        let g = orientation_grid(2.0, 0.5);
        assert!(g.iter().all(|&t| t > 2.0 && t <= 4.0 + 1e-12));
        let g = orientation_grid(-10.0, 1.0);
        assert!(g.is_empty());
    }
}
