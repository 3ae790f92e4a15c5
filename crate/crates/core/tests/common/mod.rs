//! Dense reference implementations shared by the integration tests.
//!
//! Everything here is built from the public pointwise kernel functions and
//! explicit inverses/determinants, never from the engine's assembly or
//! Cholesky paths.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use txforce::gp::{CovariateModel, GpModel, PeriodicTerm, Series, Treatment};
use txforce::kernel::{causal_force_kernel, periodic_kernel, se_kernel};
use txforce::lfm::{cov_output_output, cross_cov_force_output};
use txforce::ForceConvention;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..hi.ln()).exp()
}

/// Random joint model over `[0, horizon]` with `n_cov` covariates and `n_treat` forces.
pub fn random_model(
    rng: &mut ChaCha8Rng,
    n_cov: usize,
    n_treat: usize,
    horizon: f64,
    convention: ForceConvention,
) -> GpModel {
    let treatments = (0..n_treat)
        .map(|m| Treatment {
            type_id: format!("type-{m}"),
            time: rng.random_range(0.1 * horizon..0.8 * horizon),
            length_scale: log_uniform(rng, 0.3, 5.0),
        })
        .collect();
    let covariates = (0..n_cov)
        .map(|j| CovariateModel {
            name: format!("c{j}"),
            se_sigma: log_uniform(rng, 0.2, 2.0),
            se_length_scale: log_uniform(rng, 0.5, 5.0),
            periodic: rng.random_bool(0.5).then(|| PeriodicTerm {
                sigma: log_uniform(rng, 0.1, 1.0),
                length_scale: log_uniform(rng, 0.5, 2.0),
                period: log_uniform(rng, 2.0, 12.0),
            }),
            noise_var: log_uniform(rng, 0.01, 0.5),
            b: rng.random_range(-1.0..1.0),
            d: log_uniform(rng, 0.1, 2.0),
            effects: (0..n_treat).map(|_| rng.random_range(-3.0..3.0)).collect(),
        })
        .collect();
    GpModel {
        covariates,
        treatments,
        jitter: 1e-8,
        convention,
    }
}

pub fn random_times(rng: &mut ChaCha8Rng, n: usize, horizon: f64) -> Vec<f64> {
    let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..horizon)).collect();
    t.sort_by(f64::total_cmp);
    t
}

/// Random observations (not drawn from the model; conditioning is exact either way).
pub fn random_data(rng: &mut ChaCha8Rng, model: &GpModel, n_per: usize, horizon: f64) -> Vec<Series> {
    model
        .covariates
        .iter()
        .map(|_| {
            let times = random_times(rng, n_per, horizon);
            let values = times.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
            Series::new(times, values)
        })
        .collect()
}

pub fn all_treatments(model: &GpModel) -> Vec<usize> {
    (0..model.treatments.len()).collect()
}

/// Noise-free `Cov(y_a(t), y_b(t2))` from the pointwise public operations.
pub fn signal_cov(model: &GpModel, a: usize, t: f64, b: usize, t2: f64) -> f64 {
    let shared = all_treatments(model);
    let mut k = cov_output_output(t, t2, &model.lfm_params(a), &model.lfm_params(b), &shared, model.convention).unwrap();
    if a == b {
        let c = &model.covariates[a];
        k += se_kernel(t, t2, c.se_sigma, c.se_length_scale).unwrap();
        if let Some(p) = &c.periodic {
            k += periodic_kernel(t, t2, p.sigma, p.length_scale, p.period).unwrap();
        }
    }
    k
}

pub fn force_prior(model: &GpModel, m: usize, s: f64, s2: f64) -> f64 {
    let tr = &model.treatments[m];
    let k = causal_force_kernel(s, s2, tr.time, tr.length_scale).unwrap();
    match model.convention {
        ForceConvention::Unzeroed => k,
        ForceConvention::Zeroed => {
            if s > tr.time && s2 > tr.time {
                k
            } else {
                0.0
            }
        }
    }
}

pub fn index(data: &[Series]) -> Vec<(usize, f64)> {
    data.iter()
        .enumerate()
        .flat_map(|(j, s)| s.times.iter().map(move |&t| (j, t)))
        .collect()
}

/// Training covariance with noise plus the engine's first-attempt jitter.
pub fn train_cov(model: &GpModel, data: &[Series]) -> DMatrix<f64> {
    let idx = index(data);
    let n = idx.len();
    let mut k = DMatrix::from_fn(n, n, |i, j| signal_cov(model, idx[i].0, idx[i].1, idx[j].0, idx[j].1));
    for i in 0..n {
        k[(i, i)] += model.covariates[idx[i].0].noise_var;
    }
    let max_diag = k.diagonal().max();
    for i in 0..n {
        k[(i, i)] += model.jitter * max_diag;
    }
    k
}

pub fn residual(model: &GpModel, data: &[Series]) -> DVector<f64> {
    let idx = index(data);
    let values: Vec<f64> = data.iter().flat_map(|s| s.values.iter().copied()).collect();
    DVector::from_iterator(
        idx.len(),
        idx.iter().zip(&values).map(|(&(j, _), &y)| {
            let c = &model.covariates[j];
            y - c.b / c.d
        }),
    )
}

/// `log N(y; mu, K)` with an explicit inverse and an LU determinant.
pub fn dense_log_likelihood(model: &GpModel, data: &[Series]) -> f64 {
    let k = train_cov(model, data);
    let r = residual(model, data);
    let inv = k.clone().try_inverse().expect("invertible");
    let det = k.lu().determinant();
    let n = r.len() as f64;
    -0.5 * (r.transpose() * inv * &r)[(0, 0)] - 0.5 * det.ln() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// Joint-Gaussian conditioning with explicit matrices: returns (mean shift, variance).
pub fn dense_condition(
    k_train: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    prior_var: &[f64],
    residual: &DVector<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let inv = k_train.clone().try_inverse().expect("invertible");
    let shift = cross.transpose() * &inv * residual;
    let reduction = cross.transpose() * &inv * cross;
    let var = prior_var.iter().enumerate().map(|(q, v)| v - reduction[(q, q)]).collect();
    (shift.iter().copied().collect(), var)
}

/// Dense posterior of covariate `j` at `query`.
pub fn dense_predict(model: &GpModel, data: &[Series], j: usize, query: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let idx = index(data);
    let cross = DMatrix::from_fn(idx.len(), query.len(), |i, q| signal_cov(model, idx[i].0, idx[i].1, j, query[q]));
    let prior: Vec<f64> = query.iter().map(|&t| signal_cov(model, j, t, j, t)).collect();
    let (shift, var) = dense_condition(&train_cov(model, data), &cross, &prior, &residual(model, data));
    let c = &model.covariates[j];
    (shift.iter().map(|s| c.b / c.d + s).collect(), var)
}

/// Dense posterior of force `m` at `query`.
pub fn dense_force(model: &GpModel, data: &[Series], m: usize, query: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let idx = index(data);
    let cross = DMatrix::from_fn(idx.len(), query.len(), |i, q| {
        let (a, t) = idx[i];
        cross_cov_force_output(t, query[q], m, &model.lfm_params(a), model.convention).unwrap()
    });
    let prior: Vec<f64> = query.iter().map(|&s| force_prior(model, m, s, s)).collect();
    dense_condition(&train_cov(model, data), &cross, &prior, &residual(model, data))
}

pub fn min_eigenvalue(k: &DMatrix<f64>) -> f64 {
    k.clone().symmetric_eigen().eigenvalues.min()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
