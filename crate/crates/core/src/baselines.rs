//! Comparison models, each fitted per covariate.
//!
//! - SE+Per: the baseline kernel with a constant mean. This is the proposed
//!   model with treatments removed, fitted through the same code path.
//! - OU+Exp: an Ornstein-Uhlenbeck kernel with an exponential-decay
//!   treatment mean `c + sum_m a_m e^{-gamma_m (t - t_m)} 1(t > t_m)`;
//!   amplitude and decay are tied per treatment type.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::PatientRecord;
use crate::error::{ensure_positive, Error, Result};
use crate::gp::{condition, gaussian_nll, posterior_predict, GpModel, Posterior, Series};
use crate::kernel::ou_raw;
use crate::train::{
    best_of_restarts, block_seed, fit_patient, median_gap, minimize, mix_seed, scale_of, BlockFit, FitConfig,
    FitResult,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    SePer,
    OuExp,
}

/// Sum-of-exponential-decays mean, one term per administration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpDecayMean {
    pub c: f64,
    pub amplitudes: Vec<f64>,
    pub decays: Vec<f64>,
}

/// `c + sum_m a_m e^{-gamma_m (t - t_m)} 1(t > t_m)`.
pub fn exp_decay_mean(t: f64, params: &ExpDecayMean, marks: &[f64]) -> Result<f64> {
    if params.amplitudes.len() != marks.len() || params.decays.len() != marks.len() {
        return Err(Error::Input(format!(
            "{} amplitudes and {} decays for {} marks",
            params.amplitudes.len(),
            params.decays.len(),
            marks.len()
        )));
    }
    let mut v = params.c;
    for (m, &tm) in marks.iter().enumerate() {
        ensure_positive(&format!("gamma[{m}]"), params.decays[m])?;
        if t > tm {
            v += params.amplitudes[m] * (-params.decays[m] * (t - tm)).exp();
        }
    }
    Ok(v)
}

/// OU+Exp model of one covariate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuExpModel {
    pub name: String,
    pub sigma: f64,
    pub length_scale: f64,
    pub noise_var: f64,
    pub c: f64,
    /// Treatment types in first-administration order.
    pub types: Vec<String>,
    /// Amplitude per type.
    pub amplitudes: Vec<f64>,
    /// Decay rate per type.
    pub decays: Vec<f64>,
    /// Administrations as (type index, mark time).
    pub marks: Vec<(usize, f64)>,
}

impl OuExpModel {
    /// The mean with per-type parameters spread onto administrations.
    pub fn mean_params(&self) -> (ExpDecayMean, Vec<f64>) {
        (
            ExpDecayMean {
                c: self.c,
                amplitudes: self.marks.iter().map(|&(k, _)| self.amplitudes[k]).collect(),
                decays: self.marks.iter().map(|&(k, _)| self.decays[k]).collect(),
            },
            self.marks.iter().map(|&(_, t)| t).collect(),
        )
    }

    pub fn mean(&self, t: f64) -> Result<f64> {
        let (p, marks) = self.mean_params();
        exp_decay_mean(t, &p, &marks)
    }

    fn n_types(&self) -> usize {
        self.types.len()
    }

    // Layout: [ln sigma, ln ell, ln noise std, c, a_1..a_K, ln gamma_1..ln gamma_K]
    fn to_vector(&self) -> Vec<f64> {
        let mut x = vec![self.sigma.ln(), self.length_scale.ln(), 0.5 * self.noise_var.ln(), self.c];
        x.extend(&self.amplitudes);
        x.extend(self.decays.iter().map(|g| g.ln()));
        x
    }

    fn with_vector(&self, x: &[f64]) -> OuExpModel {
        let k = self.n_types();
        OuExpModel {
            sigma: x[0].exp(),
            length_scale: x[1].exp(),
            noise_var: (2.0 * x[2]).exp(),
            c: x[3],
            amplitudes: x[4..4 + k].to_vec(),
            decays: x[4 + k..4 + 2 * k].iter().map(|v| v.exp()).collect(),
            ..self.clone()
        }
    }

    fn covariance(&self, times: &[f64]) -> DMatrix<f64> {
        let n = times.len();
        DMatrix::from_fn(n, n, |i, j| {
            ou_raw(times[i] - times[j], self.sigma, self.length_scale) + if i == j { self.noise_var } else { 0.0 }
        })
    }

    fn mean_vector(&self, times: &[f64]) -> Result<DVector<f64>> {
        let (p, marks) = self.mean_params();
        let v = times.iter().map(|&t| exp_decay_mean(t, &p, &marks)).collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(v))
    }

    /// Negative log marginal likelihood of `data`.
    pub fn nll(&self, data: &Series) -> Result<f64> {
        let (v, _, _) = gaussian_nll(
            &self.covariance(&data.times),
            &self.mean_vector(&data.times)?,
            &DVector::from_column_slice(&data.values),
            crate::gp::DEFAULT_RELATIVE_JITTER,
        )?;
        Ok(v)
    }

    fn nll_and_gradient(&self, x: &[f64], data: &Series) -> Result<(f64, Vec<f64>)> {
        let m = self.with_vector(x);
        let t = &data.times;
        let (value, factor, alpha) = gaussian_nll(
            &m.covariance(t),
            &m.mean_vector(t)?,
            &DVector::from_column_slice(&data.values),
            crate::gp::DEFAULT_RELATIVE_JITTER,
        )?;
        let k = m.n_types();
        let n = t.len();
        let mut w = factor.chol.inverse();
        w -= &alpha * alpha.transpose();
        let mut g = vec![0.0; x.len()];
        for i in 0..n {
            for j in i..n {
                let weight = if i == j { 0.5 } else { 1.0 } * w[(i, j)];
                let r = (t[i] - t[j]).abs();
                let kv = ou_raw(r, m.sigma, m.length_scale);
                g[0] += weight * 2.0 * kv;
                g[1] += weight * kv * r / m.length_scale;
                if i == j {
                    g[2] += weight * 2.0 * m.noise_var;
                }
            }
            g[3] -= alpha[i];
            for &(ty, tm) in &m.marks {
                if t[i] > tm {
                    let e = (-m.decays[ty] * (t[i] - tm)).exp();
                    g[4 + ty] -= alpha[i] * e;
                    g[4 + k + ty] += alpha[i] * m.amplitudes[ty] * e * m.decays[ty] * (t[i] - tm);
                }
            }
        }
        // Relative jitter on a constant diagonal sigma^2 + noise.
        if let Some((_, max_diag)) = factor.max_diagonal() {
            let scale = 0.5 * w.trace() * factor.jitter / max_diag;
            g[0] += scale * 2.0 * m.sigma * m.sigma;
            g[2] += scale * 2.0 * m.noise_var;
        }
        Ok((value, g))
    }

    /// Posterior at `query` given this covariate's training series.
    pub fn predict(&self, train: &Series, query: &[f64], with_noise: bool) -> Result<Posterior> {
        let (_, factor, alpha) = gaussian_nll(
            &self.covariance(&train.times),
            &self.mean_vector(&train.times)?,
            &DVector::from_column_slice(&train.values),
            crate::gp::DEFAULT_RELATIVE_JITTER,
        )?;
        let cross = DMatrix::from_fn(train.len(), query.len(), |i, q| {
            ou_raw(train.times[i] - query[q], self.sigma, self.length_scale)
        });
        let prior_mean = self.mean_vector(query)?;
        let prior_var = vec![self.sigma * self.sigma; query.len()];
        let mut post = condition(&factor, &alpha, &cross, prior_mean.as_slice(), &prior_var, query)?;
        if with_noise {
            for v in &mut post.variance {
                *v += self.noise_var;
            }
        }
        Ok(post)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuExpFit {
    pub covariates: Vec<OuExpModel>,
    pub blocks: Vec<BlockFit>,
}

fn initial_ou_exp(name: &str, data: &Series, treatments: &[(String, f64)]) -> OuExpModel {
    let mut types: Vec<String> = Vec::new();
    let marks = treatments
        .iter()
        .map(|(ty, t)| {
            let k = types.iter().position(|x| x == ty).unwrap_or_else(|| {
                types.push(ty.clone());
                types.len() - 1
            });
            (k, *t)
        })
        .collect();
    let gap = median_gap(&data.times);
    let sd = scale_of(&data.values);
    OuExpModel {
        name: name.to_string(),
        sigma: sd,
        length_scale: gap,
        noise_var: (0.1 * sd).powi(2),
        c: 0.0,
        amplitudes: vec![0.0; types.len()],
        decays: vec![1.0 / gap; types.len()],
        types,
        marks,
    }
}

/// Fit OU+Exp to one covariate.
pub fn fit_ou_exp(
    name: &str,
    data: &Series,
    treatments: &[(String, f64)],
    config: &FitConfig,
) -> Result<(OuExpModel, BlockFit)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Input(format!("covariate {name} has no observations")));
    }
    let init = initial_ou_exp(name, data, treatments);
    let x_init = init.to_vector();
    let k = init.n_types();
    let seed = block_seed(config.seed, &["ou-exp", name]);
    let objective = |x: &[f64]| init.nll_and_gradient(x, data);
    let (best, best_restart, restarts) = best_of_restarts(config.restarts, config.parallel, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, r as u64 + 1));
        let x0: Vec<f64> = x_init
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let z: f64 = rng.sample(StandardNormal);
                let amplitude = (4..4 + k).contains(&i);
                let log = i < 3 || i >= 4 + k;
                if amplitude {
                    x + z
                } else if log && r > 0 {
                    x + config.restart_log_jitter * z
                } else {
                    x
                }
            })
            .collect();
        let initial = objective(&x0).ok().map(|(v, _)| v);
        (initial, minimize(objective, &x0, &config.optimizer))
    })?;
    let block = BlockFit {
        covariates: vec![name.to_string()],
        best_restart,
        objective: best.value,
        gradient_max_norm: best.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs())),
        restarts,
    };
    Ok((init.with_vector(&best.x), block))
}

/// A fitted comparison model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaselineFit {
    SePer(FitResult),
    OuExp(OuExpFit),
}

impl BaselineFit {
    /// Posterior of covariate `j` given the full training series of the record.
    pub fn predict(&self, train: &[Series], j: usize, query: &[f64], with_noise: bool) -> Result<Posterior> {
        match self {
            BaselineFit::SePer(fit) => {
                // Condition on covariate j alone; the joint jitter would see the other scales.
                let (covariate, series) = fit
                    .model
                    .covariates
                    .get(j)
                    .zip(train.get(j))
                    .ok_or_else(|| Error::Input(format!("covariate index {j} out of range")))?;
                let single = GpModel {
                    covariates: vec![covariate.clone()],
                    treatments: Vec::new(),
                    ..fit.model.clone()
                };
                posterior_predict(&single, std::slice::from_ref(series), 0, query, with_noise)
            }
            BaselineFit::OuExp(fit) => {
                let model = fit
                    .covariates
                    .get(j)
                    .ok_or_else(|| Error::Input(format!("covariate index {j} out of range")))?;
                let series = train
                    .get(j)
                    .ok_or_else(|| Error::Input(format!("covariate index {j} out of range")))?;
                model.predict(series, query, with_noise)
            }
        }
    }
}

/// Fit a comparison model to every covariate of `record` independently.
pub fn fit_baseline(kind: BaselineKind, record: &PatientRecord, config: &FitConfig) -> Result<BaselineFit> {
    match kind {
        BaselineKind::SePer => Ok(BaselineFit::SePer(fit_patient(&record.without_treatments(), config)?)),
        BaselineKind::OuExp => {
            let treatments: Vec<(String, f64)> = record
                .treatments
                .iter()
                .map(|t| (t.treatment_type.clone(), t.time))
                .collect();
            let mut covariates = Vec::new();
            let mut blocks = Vec::new();
            for (c, s) in record.covariates.iter().zip(record.series()) {
                let (m, b) = fit_ou_exp(&c.name, &s, &treatments, config)?;
                covariates.push(m);
                blocks.push(b);
            }
            Ok(BaselineFit::OuExp(OuExpFit { covariates, blocks }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::central_difference;

    #[test]
    fn mean_examples() {
        let p = ExpDecayMean {
            c: 0.5,
            amplitudes: vec![2.0],
            decays: vec![1.0],
        };
        assert_eq!(exp_decay_mean(0.0, &p, &[1.0]).unwrap(), 0.5);
        assert_eq!(exp_decay_mean(1.0, &p, &[1.0]).unwrap(), 0.5);
        let just_after = exp_decay_mean(1.0 + 1e-12, &p, &[1.0]).unwrap();
        assert!((just_after - 2.5).abs() < 1e-11);
        let p0 = ExpDecayMean { c: 0.0, ..p.clone() };
        assert!((exp_decay_mean(2.0, &p0, &[1.0]).unwrap() - 0.735_759).abs() < 1e-6);
        let bad = ExpDecayMean {
            decays: vec![0.0],
            ..p
        };
        assert!(matches!(exp_decay_mean(2.0, &bad, &[1.0]), Err(Error::ParameterDomain(_))));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let data = Series::new(
            vec![0.0, 0.5, 1.1, 2.0, 2.2, 3.5, 4.0, 5.5],
            vec![0.2, -0.1, 1.5, 2.0, 1.7, 0.9, 0.4, 0.1],
        );
        let mut m = initial_ou_exp("x", &data, &[("a".into(), 1.0), ("b".into(), 3.0), ("a".into(), 4.2)]);
        m.amplitudes = vec![1.3, -0.7];
        m.decays = vec![0.8, 1.9];
        m.c = 0.2;
        let x = m.to_vector();
        let (_, g) = m.nll_and_gradient(&x, &data).unwrap();
        let fd = central_difference(|x| m.nll_and_gradient(x, &data).map(|r| r.0), &x).unwrap();
        for (k, (a, b)) in g.iter().zip(&fd).enumerate() {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-2), "coordinate {k}: {a} vs {b}");
        }
    }
}
