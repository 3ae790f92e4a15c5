//! Experiment protocol, reports, trajectory files and self-checks.
//!
//! Per patient: rebase times to the first observation, subtract per-covariate
//! means, split each covariate 70/30 in time order, fit on the first part,
//! predict the held-out times and score MAE in original units. Aggregates are
//! mean and standard error across patients.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_baseline, BaselineFit, BaselineKind};
use crate::config::{GradcheckSettings, OracleSettings, RunConfig};
use crate::data::{cohort_filter, load_records, normalize, split_train_test, AttritionStep, DataFormat, PatientRecord};
use crate::error::{Error, Result};
use crate::gp::{
    posterior_latent_force, posterior_predict, CovariateModel, GpModel, LatentForcePosterior, PeriodicTerm, Posterior, Series,
    Treatment,
};
use crate::kernel::ForceConvention;
use crate::lfm::{cov_output_output, cross_cov_force_output, quadrature_cov_output, quadrature_cross_cov, LfmParams};
use crate::train::{block_seed, central_difference, fit_patient, nll, nll_and_gradient, FitConfig, FitResult, Schema};

/// Report layout version.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Mean absolute error.
pub fn mae(predictions: &[f64], actuals: &[f64]) -> Result<f64> {
    if predictions.len() != actuals.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} actual values",
            predictions.len(),
            actuals.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Input("MAE of an empty sequence".into()));
    }
    Ok(predictions.iter().zip(actuals).map(|(p, a)| (p - a).abs()).sum::<f64>() / predictions.len() as f64)
}

/// Sample mean and standard error (`sd / sqrt N`, undefined for `N < 2`).
pub fn mean_and_se(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some((var / n as f64).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Proposed,
    SePer,
    OuExp,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Proposed, Method::SePer, Method::OuExp];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Proposed => "proposed",
            Method::SePer => "se-per",
            Method::OuExp => "ou-exp",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Method::Proposed),
            "se-per" => Ok(Method::SePer),
            "ou-exp" => Ok(Method::OuExp),
            other => Err(Error::Input(format!(
                "unknown method {other:?} (expected proposed, se-per or ou-exp)"
            ))),
        }
    }
}

/// A fitted model of any method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Fitted {
    Proposed(FitResult),
    Baseline(BaselineFit),
}

impl Fitted {
    pub fn predict(&self, train: &[Series], j: usize, query: &[f64], with_noise: bool) -> Result<Posterior> {
        match self {
            Fitted::Proposed(fit) => posterior_predict(&fit.model, train, j, query, with_noise),
            Fitted::Baseline(fit) => fit.predict(train, j, query, with_noise),
        }
    }

    pub fn objective(&self) -> f64 {
        match self {
            Fitted::Proposed(f) | Fitted::Baseline(BaselineFit::SePer(f)) => f.objective,
            Fitted::Baseline(BaselineFit::OuExp(f)) => f.blocks.iter().map(|b| b.objective).sum(),
        }
    }
}

/// Fit `method` to a rebased, normalized training record.
pub fn fit_method(method: Method, record: &PatientRecord, config: &FitConfig) -> Result<Fitted> {
    match method {
        Method::Proposed => fit_patient(record, config).map(Fitted::Proposed),
        Method::SePer => fit_baseline(BaselineKind::SePer, record, config).map(Fitted::Baseline),
        Method::OuExp => fit_baseline(BaselineKind::OuExp, record, config).map(Fitted::Baseline),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateScore {
    pub covariate: String,
    /// `None` when the covariate has no held-out observations.
    pub mae: Option<f64>,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientOutcome {
    pub patient_id: String,
    pub scores: Vec<CovariateScore>,
    pub objective: Option<f64>,
    pub error: Option<String>,
}

impl PatientOutcome {
    pub fn mae_of(&self, covariate: &str) -> Option<f64> {
        self.scores.iter().find(|s| s.covariate == covariate).and_then(|s| s.mae)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeSummary {
    pub covariate: String,
    pub mean: Option<f64>,
    pub standard_error: Option<f64>,
    pub patients: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub summary: Vec<MaeSummary>,
    pub failures: usize,
    /// Sorted by patient id.
    pub patients: Vec<PatientOutcome>,
}

impl MethodReport {
    pub fn patient(&self, id: &str) -> Option<&PatientOutcome> {
        self.patients.iter().find(|p| p.patient_id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub convention: ForceConvention,
    pub split_fraction: f64,
    pub n_patients: usize,
    pub attrition: Vec<AttritionStep>,
    pub methods: Vec<MethodReport>,
}

impl EvalReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }
}

/// One row of a trajectory file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub covariate: String,
    /// Original time axis (hours).
    pub time: f64,
    /// Posterior mean in original units.
    pub mean: f64,
    /// Posterior variance of the noise-free signal.
    pub variance: f64,
    pub observed: Option<f64>,
    /// `train` or `test` for observation rows.
    pub split: Option<String>,
    pub treatment_mark: Option<String>,
}

pub struct PatientEvaluation {
    pub outcome: PatientOutcome,
    pub trajectory: Vec<TrajectoryRow>,
    /// Fitted on the rebased, normalized training part.
    pub fitted: Fitted,
}

pub fn patient_fit_config(config: &RunConfig, patient_id: &str) -> FitConfig {
    FitConfig {
        seed: block_seed(config.fit.seed, &[patient_id]),
        ..config.fit.clone()
    }
}

/// A model fitted to a whole record, with the bookkeeping needed to predict
/// in the record's original time axis and units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientFit {
    pub patient_id: String,
    /// Subtracted from record times before fitting.
    pub time_offset: f64,
    pub covariates: Vec<String>,
    /// Per-covariate means removed by normalization.
    pub means: Vec<f64>,
    pub fitted: Fitted,
}

fn prepared(record: &PatientRecord) -> Result<(PatientRecord, f64, Vec<f64>)> {
    let (rebased, offset) = record.rebase_time();
    let (normalized, means) = normalize(&rebased)?;
    Ok((normalized, offset, means))
}

/// Rebase, normalize and fit all of `record` (no train/test split).
pub fn fit_record(record: &PatientRecord, method: Method, config: &RunConfig) -> Result<PatientFit> {
    let (normalized, time_offset, means) = prepared(record)?;
    let fitted = fit_method(method, &normalized, &patient_fit_config(config, &record.patient_id))?;
    Ok(PatientFit {
        patient_id: record.patient_id.clone(),
        time_offset,
        covariates: record.covariate_names(),
        means,
        fitted,
    })
}

impl PatientFit {
    fn conditioning_data(&self, record: &PatientRecord) -> Result<Vec<Series>> {
        if record.patient_id != self.patient_id || record.covariate_names() != self.covariates {
            return Err(Error::Consistency(format!(
                "fit for patient {} ({:?}) does not match record {} ({:?})",
                self.patient_id,
                self.covariates,
                record.patient_id,
                record.covariate_names()
            )));
        }
        let (normalized, _, _) = prepared(record)?;
        Ok(normalized.series())
    }

    /// Posterior of covariate `j` at original-axis `times`, in original units.
    pub fn predict(&self, record: &PatientRecord, j: usize, times: &[f64], with_noise: bool) -> Result<Posterior> {
        let data = self.conditioning_data(record)?;
        let local: Vec<f64> = times.iter().map(|t| t - self.time_offset).collect();
        let mut post = self.fitted.predict(&data, j, &local, with_noise)?;
        post.times = times.to_vec();
        for m in &mut post.mean {
            *m += self.means[j];
        }
        Ok(post)
    }

    /// Posterior of latent force `m` and its effects; proposed method only.
    pub fn latent_force(&self, record: &PatientRecord, m: usize, times: &[f64]) -> Result<LatentForcePosterior> {
        let Fitted::Proposed(fit) = &self.fitted else {
            return Err(Error::Input("latent forces exist only for the proposed method".into()));
        };
        let data = self.conditioning_data(record)?;
        let local: Vec<f64> = times.iter().map(|t| t - self.time_offset).collect();
        let mut post = posterior_latent_force(&fit.model, &data, m, &local)?;
        post.force.times = times.to_vec();
        for e in &mut post.effects {
            e.times = times.to_vec();
        }
        Ok(post)
    }
}

/// Run the protocol on one patient.
pub fn evaluate_patient(record: &PatientRecord, method: Method, config: &RunConfig) -> Result<PatientEvaluation> {
    let (normalized, offset, means) = prepared(record)?;
    let (train, test) = split_train_test(&normalized, config.split_fraction)?;
    let fitted = fit_method(method, &train, &patient_fit_config(config, &record.patient_id))?;
    let train_series = train.series();

    let mut scores = Vec::new();
    let mut trajectory = Vec::new();
    let horizon = normalized
        .covariates
        .iter()
        .flat_map(|c| c.observations.iter().map(|o| o.time))
        .fold(0.0f64, f64::max);
    for (j, c) in test.covariates.iter().enumerate() {
        let times: Vec<f64> = c.observations.iter().map(|o| o.time).collect();
        let mae_value = if times.is_empty() {
            None
        } else {
            let post = fitted.predict(&train_series, j, &times, false)?;
            let pred: Vec<f64> = post.mean.iter().map(|m| m + means[j]).collect();
            let actual: Vec<f64> = c.observations.iter().map(|o| o.value + means[j]).collect();
            Some(mae(&pred, &actual)?)
        };
        scores.push(CovariateScore {
            covariate: c.name.clone(),
            mae: mae_value,
            n_test: times.len(),
        });

        // Trajectory: dense grid, observations and in-range treatment marks.
        let n = config.trajectory_points;
        let mut rows: Vec<(f64, Option<f64>, Option<String>, Option<String>)> = (0..n)
            .map(|k| (horizon * k as f64 / (n - 1) as f64, None, None, None))
            .collect();
        for (part, rec) in [("train", &train), ("test", &test)] {
            for o in &rec.covariates[j].observations {
                rows.push((o.time, Some(o.value + means[j]), Some(part.to_string()), None));
            }
        }
        for t in &normalized.treatments {
            if (0.0..=horizon).contains(&t.time) {
                rows.push((t.time, None, None, Some(t.treatment_type.clone())));
            }
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let query: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let post = fitted.predict(&train_series, j, &query, false)?;
        for (k, (t, observed, split, mark)) in rows.into_iter().enumerate() {
            trajectory.push(TrajectoryRow {
                covariate: c.name.clone(),
                time: t + offset,
                mean: post.mean[k] + means[j],
                variance: post.variance[k],
                observed,
                split,
                treatment_mark: mark,
            });
        }
    }
    Ok(PatientEvaluation {
        outcome: PatientOutcome {
            patient_id: record.patient_id.clone(),
            scores,
            objective: Some(fitted.objective()),
            error: None,
        },
        trajectory,
        fitted,
    })
}

fn summarize(outcomes: &[PatientOutcome]) -> Vec<MaeSummary> {
    let mut names: Vec<String> = Vec::new();
    for o in outcomes {
        for s in &o.scores {
            if !names.contains(&s.covariate) {
                names.push(s.covariate.clone());
            }
        }
    }
    names
        .into_iter()
        .map(|name| {
            let values: Vec<f64> = outcomes.iter().filter_map(|o| o.mae_of(&name)).collect();
            let (mean, standard_error) = mean_and_se(&values);
            MaeSummary {
                covariate: name,
                mean,
                standard_error,
                patients: values.len(),
            }
        })
        .collect()
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// File-name-safe version of a patient id.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Evaluate `methods` on `records`. With `out_dir`, writes `report.json`,
/// `timing.json` and `trajectories/<method>/<patient>.csv` there.
pub fn run_experiment(
    records: &[PatientRecord],
    methods: &[Method],
    config: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    config.validate()?;
    let start = Instant::now();
    let (cohort, attrition) = cohort_filter(records, &config.filters);
    let mut cohort = cohort;
    cohort.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));

    let mut method_reports = Vec::new();
    for &method in methods {
        let results: Vec<(PatientOutcome, Vec<TrajectoryRow>)> = in_pool(config.threads, || {
            cohort
                .par_iter()
                .map(|r| match evaluate_patient(r, method, config) {
                    Ok(e) => (e.outcome, e.trajectory),
                    Err(e) => {
                        log::warn!("patient {} ({method}): {e}", r.patient_id);
                        (
                            PatientOutcome {
                                patient_id: r.patient_id.clone(),
                                scores: Vec::new(),
                                objective: None,
                                error: Some(e.to_string()),
                            },
                            Vec::new(),
                        )
                    }
                })
                .collect()
        })?;
        if let Some(dir) = out_dir {
            let tdir = dir.join("trajectories").join(method.to_string());
            fs::create_dir_all(&tdir)?;
            for (outcome, rows) in &results {
                if outcome.error.is_none() {
                    write_trajectory(&tdir.join(format!("{}.csv", file_stem(&outcome.patient_id))), rows)?;
                }
            }
        }
        let patients: Vec<PatientOutcome> = results.into_iter().map(|(o, _)| o).collect();
        method_reports.push(MethodReport {
            method,
            summary: summarize(&patients),
            failures: patients.iter().filter(|p| p.error.is_some()).count(),
            patients,
        });
    }
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: config.fit.seed,
        config_hash: config.hash(),
        convention: config.fit.convention,
        split_fraction: config.split_fraction,
        n_patients: cohort.len(),
        attrition,
        methods: method_reports,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), to_json(&report)?)?;
        let timing = serde_json::json!({ "wall_seconds": start.elapsed().as_secs_f64() });
        fs::write(dir.join("timing.json"), to_json(&timing)?)?;
    }
    Ok(report)
}

/// Load a dataset (format by extension) and run [`run_experiment`].
pub fn run_experiment_path(
    dataset: &Path,
    methods: &[Method],
    config: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let records = load_records(dataset, DataFormat::from_path(dataset)?, &config.load)?;
    run_experiment(&records, methods, config, out_dir)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Time ordering of an oracle case.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    /// `t, t2 > t_m`
    BothAfter,
    /// `t > t_m >= t2`
    FirstAfter,
    /// `t2 > t_m >= t`
    SecondAfter,
    /// `t_m >= t, t2`
    BothBefore,
}

impl Ordering {
    pub const ALL: [Ordering; 4] = [
        Ordering::BothAfter,
        Ordering::FirstAfter,
        Ordering::SecondAfter,
        Ordering::BothBefore,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub conventions: Vec<ForceConvention>,
    /// Force all effect sizes to 0.
    pub zero_effects: bool,
    /// Multiply every closed-form value by this (sensitivity fixture).
    pub corrupt_factor: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            conventions: vec![ForceConvention::Unzeroed, ForceConvention::Zeroed],
            zero_effects: false,
            corrupt_factor: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCase {
    pub t: f64,
    pub t2: f64,
    pub mark: f64,
    pub ell: f64,
    pub d_a: f64,
    pub d_b: f64,
    pub s_a: f64,
    pub s_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleFailure {
    pub case: OracleCase,
    pub closed_form: f64,
    pub quadrature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleStratum {
    pub ordering: Ordering,
    pub convention: ForceConvention,
    /// `cross` or `output`.
    pub quantity: String,
    pub cases: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub failures: Vec<OracleFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub cases: usize,
    pub seed: u64,
    pub strata: Vec<OracleStratum>,
    pub passed: bool,
}

fn oracle_case(rng: &mut ChaCha8Rng, ordering: Ordering, zero_effects: bool) -> OracleCase {
    let after = |rng: &mut ChaCha8Rng, mark: f64| mark.max(0.0) + rng.random_range(0.05..5.0);
    let mark = match ordering {
        Ordering::BothAfter => rng.random_range(-2.0..4.0),
        _ => rng.random_range(0.2..5.0),
    };
    let before = |rng: &mut ChaCha8Rng| rng.random_range(0.0..mark);
    let (t, t2) = match ordering {
        Ordering::BothAfter => (after(rng, mark), after(rng, mark)),
        Ordering::FirstAfter => (after(rng, mark), before(rng)),
        Ordering::SecondAfter => (before(rng), after(rng, mark)),
        Ordering::BothBefore => (before(rng), before(rng)),
    };
    let mut s = || if zero_effects { 0.0 } else { rng.random_range(-3.0..3.0) };
    let (s_a, s_b) = (s(), s());
    OracleCase {
        t,
        t2,
        mark,
        ell: rng.random_range(0.2..3.0),
        d_a: rng.random_range(0.05..3.0),
        d_b: rng.random_range(0.05..3.0),
        s_a,
        s_b,
    }
}

/// Compare closed forms with quadrature on `n` random cases, stratified over
/// the four time orderings, under each requested convention.
pub fn oracle_check(n: usize, seed: u64, settings: &OracleSettings, options: &OracleOptions) -> Result<OracleReport> {
    if n == 0 {
        return Err(Error::Input("oracle check needs at least one case".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<(Ordering, OracleCase)> = (0..n)
        .map(|i| {
            let o = Ordering::ALL[i % 4];
            (o, oracle_case(&mut rng, o, options.zero_effects))
        })
        .collect();
    let mut strata = Vec::new();
    for &convention in &options.conventions {
        for &ordering in &Ordering::ALL {
            let chosen: Vec<&OracleCase> = cases.iter().filter(|(o, _)| *o == ordering).map(|(_, c)| c).collect();
            if chosen.is_empty() {
                continue;
            }
            let evaluated: Vec<Result<((f64, f64), (f64, f64))>> = chosen
                .par_iter()
                .map(|c| {
                    let pa = LfmParams {
                        b: 0.0,
                        d: c.d_a,
                        s: vec![c.s_a],
                        ell: vec![c.ell],
                        t_marks: vec![c.mark],
                    };
                    let pb = LfmParams {
                        d: c.d_b,
                        s: vec![c.s_b],
                        ..pa.clone()
                    };
                    let cross = cross_cov_force_output(c.t, c.t2, 0, &pa, convention)? * options.corrupt_factor;
                    let cross_q = quadrature_cross_cov(c.t, c.t2, 0, &pa, settings.quadrature_tolerance, convention)?;
                    let out = cov_output_output(c.t, c.t2, &pa, &pb, &[0], convention)? * options.corrupt_factor;
                    let out_q = quadrature_cov_output(
                        c.t,
                        c.t2,
                        &pa,
                        &pb,
                        &[0],
                        settings.quadrature_tolerance * 10.0,
                        convention,
                    )?;
                    Ok(((cross, cross_q), (out, out_q)))
                })
                .collect();
            for (k, (quantity, tolerance)) in [("cross", settings.cross_tolerance), ("output", settings.output_tolerance)]
                .into_iter()
                .enumerate()
            {
                let mut stratum = OracleStratum {
                    ordering,
                    convention,
                    quantity: quantity.into(),
                    cases: chosen.len(),
                    max_deviation: 0.0,
                    tolerance,
                    failures: Vec::new(),
                };
                for (c, r) in chosen.iter().zip(&evaluated) {
                    let (closed, quad) = match r {
                        Ok(pair) => {
                            if k == 0 {
                                pair.0
                            } else {
                                pair.1
                            }
                        }
                        Err(e) => {
                            return Err(Error::numerical(
                                "oracle evaluation failed",
                                format!("{e}; case {c:?}"),
                            ))
                        }
                    };
                    let dev = (closed - quad).abs();
                    stratum.max_deviation = stratum.max_deviation.max(dev);
                    if !(dev <= tolerance) {
                        stratum.failures.push(OracleFailure {
                            case: (*c).clone(),
                            closed_form: closed,
                            quadrature: quad,
                        });
                    }
                }
                strata.push(stratum);
            }
        }
    }
    let passed = strata.iter().all(|s| s.failures.is_empty());
    Ok(OracleReport {
        cases: n,
        seed,
        strata,
        passed,
    })
}

/// Random two-covariate model and data with `n_obs` observations in total.
pub fn random_problem(rng: &mut impl Rng, n_obs: usize, convention: ForceConvention) -> (GpModel, Vec<Series>) {
    let n_treat = rng.random_range(1..=2);
    let types = ["a", "b"];
    let treatments: Vec<Treatment> = (0..n_treat)
        .map(|_| Treatment {
            type_id: types[rng.random_range(0..2)].to_string(),
            time: rng.random_range(-1.0..6.0),
            length_scale: 0.0,
        })
        .collect();
    let mut model = GpModel {
        covariates: (0..2)
            .map(|j| CovariateModel {
                name: format!("c{j}"),
                se_sigma: rng.random_range(0.5..2.0),
                se_length_scale: rng.random_range(0.5..3.0),
                periodic: Some(PeriodicTerm {
                    sigma: rng.random_range(0.2..1.0),
                    length_scale: rng.random_range(0.5..2.0),
                    period: rng.random_range(3.0..10.0),
                }),
                noise_var: rng.random_range(0.05..0.3),
                b: rng.random_range(-1.0..1.0),
                d: rng.random_range(0.3..2.0),
                effects: vec![0.0; n_treat],
            })
            .collect(),
        treatments,
        jitter: crate::gp::DEFAULT_RELATIVE_JITTER,
        convention,
    };
    // Tied values: one draw per (covariate, type) and per type.
    let ell: BTreeMap<&str, f64> = types.iter().map(|&t| (t, rng.random_range(0.5..3.0))).collect();
    for tr in &mut model.treatments {
        tr.length_scale = ell[tr.type_id.as_str()];
    }
    for c in &mut model.covariates {
        let s: BTreeMap<&str, f64> = types.iter().map(|&t| (t, rng.random_range(-2.0..2.0))).collect();
        for (m, tr) in model.treatments.iter().enumerate() {
            c.effects[m] = s[tr.type_id.as_str()];
        }
    }
    let first = n_obs / 2;
    let data = [first, n_obs - first]
        .iter()
        .map(|&k| {
            let mut times: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..8.0)).collect();
            times.sort_by(f64::total_cmp);
            let values = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            Series::new(times, values)
        })
        .collect();
    (model, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientMismatch {
    pub case: usize,
    pub parameter: String,
    pub analytic: f64,
    pub finite_difference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub cases: usize,
    pub coordinates: usize,
    /// Largest `|analytic - fd| / max(|fd|, floor / rel_tol)` seen.
    pub max_relative_error: f64,
    pub mismatches: Vec<GradientMismatch>,
    pub passed: bool,
}

/// Analytic gradients against central differences on random problems.
pub fn gradcheck(settings: &GradcheckSettings, seed: u64, convention: ForceConvention) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        cases: settings.cases,
        coordinates: 0,
        max_relative_error: 0.0,
        mismatches: Vec::new(),
        passed: true,
    };
    for case in 0..settings.cases {
        let (model, data) = random_problem(&mut rng, settings.observations, convention);
        let schema = Schema::for_model(&model);
        let x = schema.unconstrain(&model)?.values;
        let (_, g) = nll_and_gradient(&schema, &x, &data)?;
        let fd = central_difference(|x| nll(&schema, x, &data), &x)?;
        for (k, (a, f)) in g.iter().zip(&fd).enumerate() {
            report.coordinates += 1;
            let err = (a - f).abs();
            let scale = f.abs().max(settings.absolute_floor / settings.relative_tolerance);
            report.max_relative_error = report.max_relative_error.max(err / scale);
            if !(err <= (settings.relative_tolerance * f.abs()).max(settings.absolute_floor)) {
                report.mismatches.push(GradientMismatch {
                    case,
                    parameter: schema.entries[k].label(&model),
                    analytic: *a,
                    finite_difference: *f,
                });
            }
        }
    }
    report.passed = report.mismatches.is_empty();
    Ok(report)
}
