//! Negative log marginal likelihood and its analytic gradient in
//! unconstrained coordinates.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Series;
use crate::kernel::{periodic_raw, se_raw};
use crate::lfm::unit_output_cov_grad;

use super::schema::{ParamKind, Schema};

/// Gaussian prior on one unconstrained coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: f64,
    pub std: f64,
}

/// Priors keyed by parameter kind; every entry of that kind gets the same prior.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Priors(pub BTreeMap<ParamKind, GaussianPrior>);

impl Priors {
    pub fn validate(&self) -> Result<()> {
        for (k, p) in &self.0 {
            if !p.mean.is_finite() || !(p.std > 0.0 && p.std.is_finite()) {
                return Err(Error::Config(format!("prior on {k}: need finite mean and std > 0")));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `sum (x - mu0)^2 / (2 tau^2)` and its gradient.
    pub fn penalty(&self, schema: &Schema, x: &[f64]) -> (f64, Vec<f64>) {
        let mut value = 0.0;
        let mut grad = vec![0.0; x.len()];
        for (i, e) in schema.entries.iter().enumerate() {
            if let Some(p) = self.0.get(&e.kind) {
                let z = x[i] - p.mean;
                let tau2 = p.std * p.std;
                value += z * z / (2.0 * tau2);
                grad[i] = z / tau2;
            }
        }
        (value, grad)
    }
}

fn describe(schema: &Schema, x: &[f64]) -> String {
    let model = schema.template();
    schema
        .entries
        .iter()
        .zip(x)
        .map(|(e, &xi)| format!("{}={:.6e}", e.label(model), e.kind.transform().constrain(xi)))
        .collect::<Vec<_>>()
        .join(", ")
}

fn with_params(err: Error, schema: &Schema, x: &[f64]) -> Error {
    match err {
        Error::Numerical { message, diagnostics } => Error::Numerical {
            message,
            diagnostics: format!("{diagnostics}; parameters: {}", describe(schema, x)),
        },
        other => other,
    }
}

/// Negative log marginal likelihood only.
pub fn nll(schema: &Schema, x: &[f64], data: &[Series]) -> Result<f64> {
    let model = schema.constrain(x);
    model
        .fit_data(data)
        .map(|(v, _, _)| v)
        .map_err(|e| with_params(e, schema, x))
}

/// Negative log marginal likelihood and its gradient with respect to `x`.
///
/// Uses `dNLL/dtheta = 1/2 tr(W dK/dtheta) - alpha^T dmu/dtheta` with
/// `W = K^-1 - alpha alpha^T`; latent-force partials come from forward-mode
/// dual numbers through the closed forms.
pub fn nll_and_gradient(schema: &Schema, x: &[f64], data: &[Series]) -> Result<(f64, Vec<f64>)> {
    let model = schema.constrain(x);
    let (value, factor, alpha) = model.fit_data(data).map_err(|e| with_params(e, schema, x))?;
    let index: Vec<(usize, f64)> = data
        .iter()
        .enumerate()
        .flat_map(|(j, s)| s.times.iter().map(move |&t| (j, t)))
        .collect();
    let n = index.len();
    let mut w: DMatrix<f64> = factor.chol.inverse();
    w -= &alpha * alpha.transpose();

    let mut g = vec![0.0; schema.len()];
    // Adds `weight * dK[i, j] / dx` to g.
    let pair = |g: &mut [f64], i: usize, j: usize, weight: f64| {
        let (a, t) = index[i];
        let (b, t2) = index[j];
        let ca = &model.covariates[a];
        let sa = &schema.slots[a];
        if a == b {
            let r = t - t2;
            let k = se_raw(r, ca.se_sigma, ca.se_length_scale);
            g[sa.se_sigma] += weight * 2.0 * k;
            g[sa.se_length] += weight * k * r * r / (ca.se_length_scale * ca.se_length_scale);
            if let (Some(p), Some([ps, pl, pp])) = (&ca.periodic, sa.per) {
                let k = periodic_raw(r, p.sigma, p.length_scale, p.period);
                let arg = PI * r / p.period;
                let s = arg.sin();
                let l2 = p.length_scale * p.length_scale;
                g[ps] += weight * 2.0 * k;
                g[pl] += weight * k * s * s / l2;
                g[pp] += weight * k * s * arg.cos() * arg / l2;
            }
            if i == j {
                g[sa.noise] += weight * 2.0 * ca.noise_var;
            }
        }
        let cb = &model.covariates[b];
        let sb = &schema.slots[b];
        for (m, tr) in model.treatments.iter().enumerate() {
            let (u, [dda, ddb, dl]) = unit_output_cov_grad(t, t2, tr.time, ca.d, cb.d, tr.length_scale, model.convention);
            let (s_a, s_b) = (ca.effects[m], cb.effects[m]);
            g[sa.effects[m]] += weight * s_b * u;
            g[sb.effects[m]] += weight * s_a * u;
            let ss = s_a * s_b;
            if ss != 0.0 {
                g[sa.d] += weight * ss * dda * ca.d;
                g[sb.d] += weight * ss * ddb * cb.d;
                g[schema.force_slots[m]] += weight * ss * dl * tr.length_scale;
            }
        }
    };
    for i in 0..n {
        for j in i..n {
            let weight = if i == j { 0.5 } else { 1.0 } * w[(i, j)];
            if weight != 0.0 {
                pair(&mut g, i, j, weight);
            }
        }
        let (a, _) = index[i];
        let (ca, sa) = (&model.covariates[a], &schema.slots[a]);
        g[sa.b] -= alpha[i] / ca.d;
        g[sa.d] += alpha[i] * ca.b / ca.d;
    }
    // The jitter is a fixed fraction of the largest diagonal entry, so it moves with that entry.
    if let Some((top, max_diag)) = factor.max_diagonal() {
        let rel = factor.jitter / max_diag;
        if rel > 0.0 {
            pair(&mut g, top, top, 0.5 * w.trace() * rel);
        }
    }
    Ok((value, g))
}

/// Prior-penalized objective and gradient.
pub fn penalized_nll_and_gradient(
    schema: &Schema,
    x: &[f64],
    data: &[Series],
    priors: &Priors,
) -> Result<(f64, Vec<f64>)> {
    let (mut v, mut g) = nll_and_gradient(schema, x, data)?;
    let (p, pg) = priors.penalty(schema, x);
    v += p;
    for (gi, pi) in g.iter_mut().zip(pg) {
        *gi += pi;
    }
    Ok((v, g))
}

/// Central-difference gradient with step `1e-5 max(1, |x_k|)`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64]) -> Result<Vec<f64>> {
    let mut xp = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let h = 1e-5 * x[k].abs().max(1.0);
        xp[k] = x[k] + h;
        let up = f(&xp)?;
        xp[k] = x[k] - h;
        let down = f(&xp)?;
        xp[k] = x[k];
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{CovariateModel, GpModel, PeriodicTerm, Treatment};
    use crate::kernel::ForceConvention;

    fn problem(convention: ForceConvention) -> (Schema, Vec<f64>, Vec<Series>) {
        let cov = |name: &str, d: f64, s: Vec<f64>| CovariateModel {
            name: name.into(),
            se_sigma: 0.8,
            se_length_scale: 1.7,
            periodic: Some(PeriodicTerm {
                sigma: 0.4,
                length_scale: 0.9,
                period: 6.0,
            }),
            noise_var: 0.05,
            b: 0.3,
            d,
            effects: s,
        };
        let model = GpModel {
            covariates: vec![cov("a", 0.7, vec![1.2, -0.4]), cov("b", 1.3, vec![-0.8, 0.6])],
            treatments: vec![
                Treatment { type_id: "x".into(), time: 1.5, length_scale: 1.1 },
                Treatment { type_id: "y".into(), time: -0.5, length_scale: 2.0 },
            ],
            jitter: 1e-8,
            convention,
        };
        let data = vec![
            Series::new(vec![0.0, 0.7, 1.9, 2.5, 4.0, 5.2], vec![0.1, 0.5, -0.2, 0.9, 1.4, 0.3]),
            Series::new(vec![0.3, 1.6, 2.0, 3.8], vec![-0.4, 0.2, 0.8, -1.0]),
        ];
        let schema = Schema::for_model(&model);
        let x = schema.unconstrain(&model).unwrap().values;
        (schema, x, data)
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        for conv in [ForceConvention::Unzeroed, ForceConvention::Zeroed] {
            let (schema, x, data) = problem(conv);
            let (_, g) = nll_and_gradient(&schema, &x, &data).unwrap();
            let fd = central_difference(|x| nll(&schema, x, &data), &x).unwrap();
            for (k, (a, b)) in g.iter().zip(&fd).enumerate() {
                assert!(
                    (a - b).abs() <= 1e-4 * b.abs().max(1e-2),
                    "{conv} coordinate {k} ({}): analytic {a} vs fd {b}",
                    schema.entries[k].label(schema.template())
                );
            }
        }
    }

    #[test]
    fn value_matches_likelihood() {
        let (schema, x, data) = problem(ForceConvention::Unzeroed);
        let (v, _) = nll_and_gradient(&schema, &x, &data).unwrap();
        let lml = crate::gp::log_marginal_likelihood(&schema.constrain(&x), &data).unwrap();
        assert!((v + lml).abs() < 1e-12 * v.abs().max(1.0));
    }

    #[test]
    fn penalty_closed_form() {
        let (schema, x, data) = problem(ForceConvention::Unzeroed);
        let mut priors = Priors::default();
        priors.0.insert(ParamKind::Decay, GaussianPrior { mean: -1.0, std: 0.5 });
        let (pv, _) = penalized_nll_and_gradient(&schema, &x, &data, &priors).unwrap();
        let base = nll(&schema, &x, &data).unwrap();
        let want: f64 = [0.7f64, 1.3]
            .iter()
            .map(|d| (d.ln() + 1.0).powi(2) / (2.0 * 0.25))
            .sum();
        assert!((pv - base - want).abs() < 1e-12);
    }

    #[test]
    fn factorization_failure_names_parameters() {
        let (schema, mut x, data) = problem(ForceConvention::Unzeroed);
        x[0] = 400.0; // sigma overflows to inf
        match nll(&schema, &x, &data) {
            Err(Error::Numerical { diagnostics, .. }) => assert!(diagnostics.contains("se_sigma[a]")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
