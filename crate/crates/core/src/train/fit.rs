//! Per-patient maximum-marginal-likelihood fitting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PatientRecord;
use crate::error::{Error, Result};
use crate::gp::{CovariateModel, GpModel, PeriodicTerm, Series, Treatment, DEFAULT_RELATIVE_JITTER};
use crate::kernel::ForceConvention;

use super::objective::{penalized_nll_and_gradient, Priors};
use super::optimize::{minimize, Minimum, OptimizationTrace, OptimizerSettings};
use super::schema::{ParamKind, Schema, Transform};

/// Covariates with fewer observations than this get no periodic component.
pub const MIN_OBSERVATIONS_FOR_PERIODIC: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub optimizer: OptimizerSettings,
    pub priors: Priors,
    pub restarts: usize,
    pub seed: u64,
    pub convention: ForceConvention,
    /// Include the periodic baseline component.
    pub periodic: bool,
    pub initial_period: f64,
    /// Apply the force sign convention after fitting.
    pub orient: bool,
    pub parallel: bool,
    pub jitter: f64,
    /// Standard deviation of the log-parameter jitter on restarts after the first.
    pub restart_log_jitter: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            optimizer: OptimizerSettings::default(),
            priors: Priors::default(),
            restarts: 3,
            seed: 0,
            convention: ForceConvention::default(),
            periodic: true,
            initial_period: 24.0,
            orient: true,
            parallel: true,
            jitter: DEFAULT_RELATIVE_JITTER,
            restart_log_jitter: 0.5,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.priors.validate()?;
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be >= 1".into()));
        }
        if !(self.initial_period > 0.0) || !(self.jitter > 0.0) || !(self.restart_log_jitter >= 0.0) {
            return Err(Error::Config("initial_period and jitter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    pub index: usize,
    pub initial_objective: Option<f64>,
    pub final_objective: Option<f64>,
    pub trace: Option<OptimizationTrace>,
    pub error: Option<String>,
}

/// One independently optimized group of covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockFit {
    pub covariates: Vec<String>,
    pub best_restart: usize,
    pub objective: f64,
    pub gradient_max_norm: f64,
    pub restarts: Vec<RestartReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: GpModel,
    pub blocks: Vec<BlockFit>,
    /// Sum of the block objectives.
    pub objective: f64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the block fitting `names`, independent of other covariates.
pub(crate) fn block_seed(seed: u64, names: &[&str]) -> u64 {
    mix_seed(seed, fnv1a(names.join("\u{1f}").as_bytes()))
}

pub(crate) fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub(crate) fn gaps(times: &[f64]) -> Vec<f64> {
    let mut t = times.to_vec();
    t.sort_by(f64::total_cmp);
    t.windows(2).map(|w| w[1] - w[0]).filter(|g| *g > 0.0).collect()
}

/// Median positive gap, or 1 hour when there is none.
pub(crate) fn median_gap(times: &[f64]) -> f64 {
    median(gaps(times)).unwrap_or(1.0)
}

/// Sample standard deviation, or 1 when undefined or zero.
pub(crate) fn scale_of(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 1.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var > 0.0 && var.is_finite() {
        var.sqrt()
    } else {
        1.0
    }
}

/// Data-driven starting model: length-scales at the median gap, signal scales
/// at the sample standard deviation, noise at 10% of it, `D` at the inverse
/// median gap, `B = 0`, `S = 0`.
pub fn initial_model(
    names: &[String],
    data: &[Series],
    treatments: &[(String, f64)],
    config: &FitConfig,
) -> GpModel {
    let pooled: Vec<f64> = data.iter().flat_map(|s| gaps(&s.times)).collect();
    let force_ell = median(pooled).unwrap_or(1.0);
    let covariates = names
        .iter()
        .zip(data)
        .map(|(name, s)| {
            let gap = median_gap(&s.times);
            let sd = scale_of(&s.values);
            CovariateModel {
                name: name.clone(),
                se_sigma: sd,
                se_length_scale: gap,
                periodic: (config.periodic && s.len() >= MIN_OBSERVATIONS_FOR_PERIODIC).then(|| PeriodicTerm {
                    sigma: sd,
                    length_scale: gap,
                    period: config.initial_period,
                }),
                noise_var: (0.1 * sd).powi(2),
                b: 0.0,
                d: 1.0 / gap,
                effects: vec![0.0; treatments.len()],
            }
        })
        .collect();
    GpModel {
        covariates,
        treatments: treatments
            .iter()
            .map(|(ty, t)| Treatment {
                type_id: ty.clone(),
                time: *t,
                length_scale: force_ell,
            })
            .collect(),
        jitter: config.jitter,
        convention: config.convention,
    }
}

/// Starting point of restart `index`: effect sizes always get `N(0, 1)`
/// jitter; later restarts also perturb log-parameters.
pub(crate) fn restart_start(schema: &Schema, x_init: &[f64], index: usize, seed: u64, log_jitter: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64 + 1));
    schema
        .entries
        .iter()
        .zip(x_init)
        .map(|(e, &x)| {
            let z: f64 = rng.sample(StandardNormal);
            match (e.kind, e.kind.transform()) {
                (ParamKind::Effect, _) => x + z,
                (_, Transform::Log) if index > 0 => x + log_jitter * z,
                _ => x,
            }
        })
        .collect()
}

/// Run `restarts` optimizations and keep the lowest objective (ties to the
/// lowest index).
pub(crate) fn best_of_restarts(
    restarts: usize,
    parallel: bool,
    run: impl Fn(usize) -> (Option<f64>, Result<Minimum>) + Sync,
) -> Result<(Minimum, usize, Vec<RestartReport>)> {
    let results: Vec<(Option<f64>, Result<Minimum>)> = if parallel {
        (0..restarts).into_par_iter().map(&run).collect()
    } else {
        (0..restarts).map(&run).collect()
    };
    let mut reports = Vec::with_capacity(restarts);
    let mut best: Option<(usize, Minimum)> = None;
    for (index, (initial, result)) in results.into_iter().enumerate() {
        match result {
            Ok(m) => {
                reports.push(RestartReport {
                    index,
                    initial_objective: initial,
                    final_objective: Some(m.value),
                    trace: Some(m.trace.clone()),
                    error: None,
                });
                if best.as_ref().is_none_or(|(_, b)| m.value < b.value) {
                    best = Some((index, m));
                }
            }
            Err(e) => reports.push(RestartReport {
                index,
                initial_objective: initial,
                final_objective: None,
                trace: None,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some((index, m)) => Ok((m, index, reports)),
        None => Err(Error::Fit(
            reports
                .iter()
                .map(|r| format!("restart {}: {}", r.index, r.error.as_deref().unwrap_or("unknown")))
                .collect(),
        )),
    }
}

fn fit_block(
    names: &[String],
    data: &[Series],
    treatments: &[(String, f64)],
    config: &FitConfig,
) -> Result<(GpModel, BlockFit)> {
    let template = initial_model(names, data, treatments, config);
    template.validate()?;
    let schema = Schema::for_model(&template);
    let x_init = schema.unconstrain(&template)?.values;
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let seed = block_seed(config.seed, &name_refs);
    let objective = |x: &[f64]| penalized_nll_and_gradient(&schema, x, data, &config.priors);

    let (best, best_restart, restarts) = best_of_restarts(config.restarts, config.parallel, |r| {
        let x0 = restart_start(&schema, &x_init, r, seed, config.restart_log_jitter);
        let initial = objective(&x0).ok().map(|(v, _)| v);
        (initial, minimize(objective, &x0, &config.optimizer))
    })?;

    let mut model = schema.constrain(&best.x);
    if config.orient {
        model.orient_forces(data)?;
    }
    let block = BlockFit {
        covariates: names.to_vec(),
        best_restart,
        objective: best.value,
        gradient_max_norm: best.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs())),
        restarts,
    };
    Ok((model, block))
}

/// Fit all covariates of `data` jointly. Without treatments the covariates
/// are independent under the model, so each is fitted on its own with a seed
/// derived from its name.
pub fn fit_series(
    names: &[String],
    data: &[Series],
    treatments: &[(String, f64)],
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    if names.len() != data.len() {
        return Err(Error::Input(format!("{} names for {} series", names.len(), data.len())));
    }
    if names.is_empty() {
        return Err(Error::Input("no covariates to fit".into()));
    }
    for (name, s) in names.iter().zip(data) {
        if s.is_empty() {
            return Err(Error::Input(format!("covariate {name} has no observations")));
        }
    }
    if !treatments.is_empty() {
        let (model, block) = fit_block(names, data, treatments, config)?;
        return Ok(FitResult {
            objective: block.objective,
            model,
            blocks: vec![block],
        });
    }
    let mut covariates = Vec::with_capacity(names.len());
    let mut blocks = Vec::with_capacity(names.len());
    for (name, s) in names.iter().zip(data) {
        let (model, block) = fit_block(std::slice::from_ref(name), std::slice::from_ref(s), &[], config)?;
        covariates.extend(model.covariates);
        blocks.push(block);
    }
    Ok(FitResult {
        model: GpModel {
            covariates,
            treatments: Vec::new(),
            jitter: config.jitter,
            convention: config.convention,
        },
        objective: blocks.iter().map(|b| b.objective).sum(),
        blocks,
    })
}

/// Fit one patient record; times must already be rebased to start at 0.
pub fn fit_patient(record: &PatientRecord, config: &FitConfig) -> Result<FitResult> {
    let names = record.covariate_names();
    let data = record.series();
    let treatments: Vec<(String, f64)> = record
        .treatments
        .iter()
        .map(|t| (t.treatment_type.clone(), t.time))
        .collect();
    fit_series(&names, &data, &treatments, config)
}
