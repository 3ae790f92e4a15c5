//! Synthetic patients sampled from the full generative model.
//!
//! Each force is drawn on a fine grid from its causal-kernel GP, the linear
//! ODE is integrated exactly for a force that is piecewise linear between
//! grid nodes, and an independent baseline GP sample plus Gaussian noise is
//! added at the observation times.
//!
//! Randomness comes from four independent ChaCha streams of the seed
//! (observation schedule, forces, baseline, noise), so changing effect sizes
//! or removing treatments never changes the baseline or noise draws.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateSeries, Observation, PatientRecord, Route, TreatmentEvent};
use crate::error::{ensure_finite, ensure_positive, Error, Result};
use crate::gp::{factorize, CovariateModel, GpModel, PeriodicTerm, Series, Treatment, ORIENTATION_WINDOW};
use crate::kernel::{gram, se_raw, ForceConvention, KernelSpec};
use crate::train::mix_seed;

const STREAM_SCHEDULE: u64 = 0;
const STREAM_FORCE: u64 = 1;
const STREAM_BASELINE: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// Relative jitter for sampling from nearly singular Gram matrices.
const SAMPLING_JITTER: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimCovariate {
    pub name: String,
    pub b: f64,
    pub d: f64,
    /// Effect size per treatment type; missing types have no effect.
    #[serde(default)]
    pub effects: BTreeMap<String, f64>,
    pub baseline: Vec<KernelSpec>,
    pub noise_var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTreatmentType {
    pub type_id: String,
    pub length_scale: f64,
    #[serde(default = "default_dose")]
    pub dose: f64,
    #[serde(default = "default_route")]
    pub route: Route,
}

fn default_dose() -> f64 {
    1.0
}

fn default_route() -> Route {
    Route::Oral
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduledTreatment {
    pub type_id: String,
    pub time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplingLaw {
    UniformRandom,
    FixedGrid,
    /// `bursts` clusters of width `width` centred uniformly at random.
    Burst { bursts: usize, width: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSchedule {
    /// Observations per covariate.
    pub count: usize,
    /// Observations fall in `[0, horizon]` hours.
    pub horizon: f64,
    pub law: SamplingLaw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default = "default_patient_id")]
    pub patient_id: String,
    pub covariates: Vec<SimCovariate>,
    #[serde(default)]
    pub treatment_types: Vec<SimTreatmentType>,
    #[serde(default)]
    pub schedule: Vec<ScheduledTreatment>,
    pub observations: ObservationSchedule,
    /// Integration step; defaults to the coarsest step the resolution rule allows.
    #[serde(default)]
    pub grid_step: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sim_convention")]
    pub convention: ForceConvention,
    /// Flip each sampled force so its unit response on the first covariate is
    /// positive on average over the orientation window.
    #[serde(default = "default_true")]
    pub canonical_force_sign: bool,
}

fn default_patient_id() -> String {
    "sim".into()
}

fn default_sim_convention() -> ForceConvention {
    ForceConvention::Zeroed
}

fn default_true() -> bool {
    true
}

impl SimConfig {
    fn treatment_type(&self, id: &str) -> Result<&SimTreatmentType> {
        self.treatment_types
            .iter()
            .find(|t| t.type_id == id)
            .ok_or_else(|| Error::Config(format!("scheduled treatment type {id:?} is not declared")))
    }

    /// Largest step allowed: `min ell / 10` and `1 / (10 max D)`.
    pub fn max_grid_step(&self) -> f64 {
        let min_ell = self
            .schedule
            .iter()
            .filter_map(|s| self.treatment_type(&s.type_id).ok())
            .map(|t| t.length_scale)
            .fold(f64::INFINITY, f64::min);
        let max_d = self.covariates.iter().map(|c| c.d).fold(0.0, f64::max);
        (min_ell / 10.0).min(1.0 / (10.0 * max_d))
    }

    pub fn step(&self) -> f64 {
        self.grid_step.unwrap_or_else(|| self.max_grid_step())
    }

    pub fn validate(&self) -> Result<()> {
        if self.covariates.is_empty() {
            return Err(Error::Config("simulation needs at least one covariate".into()));
        }
        for c in &self.covariates {
            ensure_finite(&format!("{}: B", c.name), c.b)?;
            ensure_positive(&format!("{}: D", c.name), c.d)?;
            ensure_positive(&format!("{}: noise_var", c.name), c.noise_var)?;
            for (ty, s) in &c.effects {
                ensure_finite(&format!("{}: S[{ty}]", c.name), *s)?;
                self.treatment_type(ty)?;
            }
            for k in &c.baseline {
                k.validate()?;
            }
        }
        for t in &self.treatment_types {
            ensure_positive(&format!("{}: length_scale", t.type_id), t.length_scale)?;
            ensure_positive(&format!("{}: dose", t.type_id), t.dose)?;
        }
        for s in &self.schedule {
            ensure_finite("treatment time", s.time)?;
            self.treatment_type(&s.type_id)?;
        }
        let o = &self.observations;
        ensure_positive("observation horizon", o.horizon)?;
        if o.count == 0 {
            return Err(Error::Config("observation count must be >= 1".into()));
        }
        if let SamplingLaw::Burst { bursts, width } = o.law {
            if bursts == 0 || !(width > 0.0) {
                return Err(Error::Config("burst law needs bursts >= 1 and width > 0".into()));
            }
        }
        let step = self.step();
        let limit = self.max_grid_step();
        if !(step > 0.0) || step > limit * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "grid step {step} violates the resolution rule (must be <= {limit}: min ell / 10 and 1 / (10 max D))"
            )));
        }
        Ok(())
    }

    /// Effect size of covariate `j` for scheduled administration `m`.
    fn effect(&self, j: usize, m: usize) -> f64 {
        self.covariates[j].effects.get(&self.schedule[m].type_id).copied().unwrap_or(0.0)
    }

    /// The generating model as a [`GpModel`]. Requires each baseline to be
    /// one SE kernel plus at most one periodic kernel.
    pub fn truth_model(&self) -> Result<GpModel> {
        self.validate()?;
        let mut covariates = Vec::new();
        for (j, c) in self.covariates.iter().enumerate() {
            let mut se = None;
            let mut per = None;
            for k in &c.baseline {
                match *k {
                    KernelSpec::Se { sigma, length_scale } if se.is_none() => se = Some((sigma, length_scale)),
                    KernelSpec::Periodic {
                        sigma,
                        length_scale,
                        period,
                    } if per.is_none() => {
                        per = Some(PeriodicTerm {
                            sigma,
                            length_scale,
                            period,
                        })
                    }
                    _ => {
                        return Err(Error::Config(format!(
                            "{}: baseline is not representable as SE plus periodic",
                            c.name
                        )))
                    }
                }
            }
            let (se_sigma, se_length_scale) =
                se.ok_or_else(|| Error::Config(format!("{}: baseline needs an SE kernel", c.name)))?;
            covariates.push(CovariateModel {
                name: c.name.clone(),
                se_sigma,
                se_length_scale,
                periodic: per,
                noise_var: c.noise_var,
                b: c.b,
                d: c.d,
                effects: (0..self.schedule.len()).map(|m| self.effect(j, m)).collect(),
            });
        }
        let treatments = self
            .schedule
            .iter()
            .map(|s| {
                Ok(Treatment {
                    type_id: s.type_id.clone(),
                    time: s.time,
                    length_scale: self.treatment_type(&s.type_id)?.length_scale,
                })
            })
            .collect::<Result<_>>()?;
        Ok(GpModel {
            covariates,
            treatments,
            jitter: crate::gp::DEFAULT_RELATIVE_JITTER,
            convention: self.convention,
        })
    }
}

/// Noise-free components at the observation times plus grid trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub grid: Vec<f64>,
    /// Right-limit force values on the grid, one row per administration.
    pub forces: Vec<Vec<f64>>,
    /// Whether each force was sign-flipped by the orientation rule.
    pub flipped: Vec<bool>,
    /// ODE output `mu_j` on the grid, per covariate.
    pub response_grid: Vec<Vec<f64>>,
    /// ODE output at the observation times.
    pub response: Vec<Series>,
    /// Baseline GP sample at the observation times.
    pub baseline: Vec<Series>,
    /// Noise-free output (`response + baseline`).
    pub latent: Vec<Series>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub record: PatientRecord,
    pub trace: SimTrace,
}

/// Integration grid: uniform nodes of spacing `step` on `[0, horizon]` plus `marks`.
fn build_grid(step: f64, horizon: f64, marks: &[f64]) -> Vec<f64> {
    let n = (horizon / step).ceil() as usize;
    let mut g: Vec<f64> = (0..n).map(|k| k as f64 * step).collect();
    g.push(horizon);
    g.extend(marks.iter().copied().filter(|&t| t > 0.0 && t < horizon));
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Force values at grid nodes as (left limit, right limit).
type ForcePath = Vec<(f64, f64)>;

/// Pre-factorized prior of one force on the grid: point 0 is the warped
/// origin shared by every node at or before the mark.
struct ForceSampler {
    mark: f64,
    chol: DMatrix<f64>,
    /// Index into the warped points for each grid node.
    point: Vec<usize>,
}

impl ForceSampler {
    fn new(grid: &[f64], mark: f64, ell: f64) -> Result<Self> {
        let mut warped = vec![0.0];
        let point = grid
            .iter()
            .map(|&t| {
                if t > mark {
                    warped.push(t - mark);
                    warped.len() - 1
                } else {
                    0
                }
            })
            .collect();
        let n = warped.len();
        // exp(-(u - u')^2 / ell^2) is an SE kernel with length-scale ell / sqrt 2.
        let ell_se = ell / std::f64::consts::SQRT_2;
        let k = DMatrix::from_fn(n, n, |i, j| se_raw(warped[i] - warped[j], 1.0, ell_se));
        let f = factorize(&k, SAMPLING_JITTER)?;
        Ok(ForceSampler {
            mark,
            chol: f.chol.l(),
            point,
        })
    }

    fn sample(&self, grid: &[f64], rng: &mut impl Rng, convention: ForceConvention) -> ForcePath {
        let n = self.chol.nrows();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g = &self.chol * z;
        grid.iter()
            .zip(&self.point)
            .map(|(&t, &p)| {
                let at_origin = g[0];
                let pre = match convention {
                    ForceConvention::Zeroed => 0.0,
                    ForceConvention::Unzeroed => at_origin,
                };
                if t < self.mark {
                    (pre, pre)
                } else if t == self.mark {
                    (pre, at_origin)
                } else {
                    (g[p], g[p])
                }
            })
            .collect()
    }
}

/// Exact solution of `y' = -D y + B + u(t)` over one step of length `h` with
/// `u` linear from `u0` to `u1`.
#[inline]
fn ode_step(y: f64, h: f64, b: f64, d: f64, u0: f64, u1: f64) -> f64 {
    if h == 0.0 {
        return y;
    }
    let decay = (-d * h).exp();
    let phi1 = -(-d * h).exp_m1() / d;
    y * decay + b * phi1 + u0 * phi1 + (u1 - u0) / h * (h - phi1) / d
}

/// Integrate `y' = -D y + B + u(t)`, `y(0) = y0`, along `grid` with `u`
/// piecewise linear between nodes given as (left, right) limits. Returns the
/// solution on the grid and at the sorted `query` times (all within the grid).
pub fn integrate_linear_ode(
    grid: &[f64],
    forcing: &[(f64, f64)],
    b: f64,
    d: f64,
    y0: f64,
    query: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut on_grid = Vec::with_capacity(grid.len());
    let mut at_query = Vec::with_capacity(query.len());
    let mut q = 0;
    let mut y = y0;
    on_grid.push(y);
    while q < query.len() && query[q] <= grid[0] {
        at_query.push(y);
        q += 1;
    }
    for k in 0..grid.len() - 1 {
        let (t0, t1) = (grid[k], grid[k + 1]);
        let h = t1 - t0;
        let u0 = forcing[k].1;
        let u1 = forcing[k + 1].0;
        while q < query.len() && query[q] <= t1 {
            let tau = query[q] - t0;
            let uq = u0 + (u1 - u0) * tau / h;
            at_query.push(ode_step(y, tau, b, d, u0, uq));
            q += 1;
        }
        y = ode_step(y, h, b, d, u0, u1);
        on_grid.push(y);
    }
    at_query.extend(std::iter::repeat_n(y, query.len() - q));
    (on_grid, at_query)
}

fn observation_times(schedule: &ObservationSchedule, rng: &mut impl Rng) -> Vec<f64> {
    let (n, hz) = (schedule.count, schedule.horizon);
    let mut t: Vec<f64> = match schedule.law {
        SamplingLaw::FixedGrid if n == 1 => vec![0.0],
        SamplingLaw::FixedGrid => (0..n).map(|i| hz * i as f64 / (n - 1) as f64).collect(),
        SamplingLaw::UniformRandom => (0..n).map(|_| rng.random_range(0.0..=hz)).collect(),
        SamplingLaw::Burst { bursts, width } => {
            let centres: Vec<f64> = (0..bursts).map(|_| rng.random_range(0.0..=hz)).collect();
            (0..n)
                .map(|i| {
                    let c = centres[i % bursts];
                    (c + width * (rng.random::<f64>() - 0.5)).clamp(0.0, hz)
                })
                .collect()
        }
    };
    t.sort_by(f64::total_cmp);
    t
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// A validated configuration with its force factors precomputed; reuse it to
/// draw many seeds.
pub struct Simulator {
    config: SimConfig,
    grid: Vec<f64>,
    forces: Vec<ForceSampler>,
    /// Baseline factor per covariate when observation times do not depend on the seed.
    fixed_baseline: Option<Vec<(Vec<f64>, DMatrix<f64>)>>,
}

fn baseline_factor(c: &SimCovariate, times: &[f64]) -> Result<DMatrix<f64>> {
    let mut k = DMatrix::zeros(times.len(), times.len());
    for spec in &c.baseline {
        k += gram(spec, times, times)?;
    }
    Ok(factorize(&k, SAMPLING_JITTER)?.chol.l())
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let marks: Vec<f64> = config.schedule.iter().map(|s| s.time).collect();
        let grid = build_grid(config.step(), config.observations.horizon, &marks);
        let forces = config
            .schedule
            .iter()
            .map(|s| ForceSampler::new(&grid, s.time, config.treatment_type(&s.type_id)?.length_scale))
            .collect::<Result<Vec<_>>>()?;
        let fixed_baseline = if config.observations.law == SamplingLaw::FixedGrid {
            let times = observation_times(&config.observations, &mut stream(0, STREAM_SCHEDULE));
            Some(
                config
                    .covariates
                    .iter()
                    .map(|c| Ok((times.clone(), baseline_factor(c, &times)?)))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        Ok(Simulator {
            config,
            grid,
            forces,
            fixed_baseline,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Draw one patient with `seed`.
    pub fn simulate(&self, seed: u64) -> Result<SimOutput> {
        let cfg = &self.config;
        let grid = &self.grid;
        let mut rng_force = stream(seed, STREAM_FORCE);
        let mut paths: Vec<ForcePath> = self
            .forces
            .iter()
            .map(|f| f.sample(grid, &mut rng_force, cfg.convention))
            .collect();

        let mut flipped = vec![false; paths.len()];
        if cfg.canonical_force_sign {
            let d0 = cfg.covariates[0].d;
            for (m, path) in paths.iter_mut().enumerate() {
                let mark = cfg.schedule[m].time;
                let ell = cfg.treatment_type(&cfg.schedule[m].type_id)?.length_scale;
                let (unit, _) = integrate_linear_ode(grid, path, 0.0, d0, 0.0, &[]);
                let window: Vec<f64> = grid
                    .iter()
                    .zip(&unit)
                    .filter(|(&t, _)| t > mark && t <= mark + ORIENTATION_WINDOW * ell)
                    .map(|(_, &y)| y)
                    .collect();
                if !window.is_empty() && window.iter().sum::<f64>() < 0.0 {
                    for v in path.iter_mut() {
                        *v = (-v.0, -v.1);
                    }
                    flipped[m] = true;
                }
            }
        }

        let mut rng_schedule = stream(seed, STREAM_SCHEDULE);
        let mut rng_baseline = stream(seed, STREAM_BASELINE);
        let mut rng_noise = stream(seed, STREAM_NOISE);
        let mut record = PatientRecord {
            patient_id: cfg.patient_id.clone(),
            covariates: Vec::new(),
            treatments: cfg
                .schedule
                .iter()
                .map(|s| {
                    let ty = cfg.treatment_type(&s.type_id)?;
                    Ok(TreatmentEvent {
                        time: s.time,
                        treatment_type: s.type_id.clone(),
                        dose: ty.dose,
                        route: ty.route,
                    })
                })
                .collect::<Result<_>>()?,
            demographics: None,
        };
        let mut trace = SimTrace {
            grid: grid.clone(),
            forces: paths.iter().map(|p| p.iter().map(|v| v.1).collect()).collect(),
            flipped,
            response_grid: Vec::new(),
            response: Vec::new(),
            baseline: Vec::new(),
            latent: Vec::new(),
        };

        for (j, c) in cfg.covariates.iter().enumerate() {
            let (times, chol) = match &self.fixed_baseline {
                Some(fixed) => (fixed[j].0.clone(), fixed[j].1.clone()),
                None => {
                    let times = observation_times(&cfg.observations, &mut rng_schedule);
                    let chol = baseline_factor(c, &times)?;
                    (times, chol)
                }
            };
            let mut forcing: ForcePath = vec![(0.0, 0.0); grid.len()];
            for (m, path) in paths.iter().enumerate() {
                let s = cfg.effect(j, m);
                if s != 0.0 {
                    for (u, p) in forcing.iter_mut().zip(path) {
                        u.0 += s * p.0;
                        u.1 += s * p.1;
                    }
                }
            }
            let (on_grid, response) = integrate_linear_ode(grid, &forcing, c.b, c.d, c.b / c.d, &times);
            let z = DVector::from_fn(times.len(), |_, _| rng_baseline.sample::<f64, _>(StandardNormal));
            let baseline = &chol * z;
            let latent: Vec<f64> = response.iter().zip(baseline.iter()).map(|(r, b)| r + b).collect();
            let noise_sd = c.noise_var.sqrt();
            let observations = times
                .iter()
                .zip(&latent)
                .map(|(&time, &f)| Observation {
                    time,
                    value: f + noise_sd * rng_noise.sample::<f64, _>(StandardNormal),
                })
                .collect();
            record.covariates.push(CovariateSeries {
                name: c.name.clone(),
                observations,
            });
            trace.response_grid.push(on_grid);
            trace.response.push(Series::new(times.clone(), response));
            trace.baseline.push(Series::new(times.clone(), baseline.iter().copied().collect()));
            trace.latent.push(Series::new(times, latent));
        }
        Ok(SimOutput { record, trace })
    }
}

/// Draw one patient from `config` with its own seed.
pub fn simulate_patient(config: &SimConfig) -> Result<SimOutput> {
    Simulator::new(config.clone())?.simulate(config.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateRange {
    pub name: String,
    #[serde(default)]
    pub b: f64,
    /// Decay drawn uniformly from `[d[0], d[1]]`.
    pub d: [f64; 2],
    pub baseline: Vec<KernelSpec>,
    pub noise_var: f64,
}

/// Recipe for a randomized synthetic cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub patients: usize,
    #[serde(default)]
    pub seed: u64,
    pub covariates: Vec<CovariateRange>,
    pub treatment_types: Vec<SimTreatmentType>,
    /// Administrations per patient, drawn uniformly from the inclusive range.
    pub treatments_per_patient: [usize; 2],
    /// Administration times drawn uniformly from this window.
    pub treatment_window: [f64; 2],
    /// `|S|` drawn uniformly from this range, sign uniformly at random.
    pub effect_magnitude: [f64; 2],
    pub observations: ObservationSchedule,
    #[serde(default)]
    pub grid_step: Option<f64>,
    #[serde(default = "default_sim_convention")]
    pub convention: ForceConvention,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.treatments_per_patient;
        if lo > hi || self.treatment_types.is_empty() && hi > 0 {
            return Err(Error::Config("invalid treatments_per_patient range".into()));
        }
        for (name, r) in [
            ("treatment_window", self.treatment_window),
            ("effect_magnitude", self.effect_magnitude),
        ] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return Err(Error::Config(format!("invalid range {name} = {r:?}")));
            }
        }
        for c in &self.covariates {
            if !(c.d[0] > 0.0 && c.d[0] <= c.d[1]) {
                return Err(Error::Config(format!("{}: invalid decay range {:?}", c.name, c.d)));
            }
        }
        Ok(())
    }

    /// Per-patient configurations, deterministic in the cohort seed.
    pub fn configs(&self) -> Result<Vec<SimConfig>> {
        self.validate()?;
        let width = self.patients.to_string().len().max(3);
        (0..self.patients)
            .map(|i| {
                let seed = mix_seed(self.seed, i as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let [lo, hi] = self.treatments_per_patient;
                let n = rng.random_range(lo..=hi);
                let mut schedule: Vec<ScheduledTreatment> = (0..n)
                    .map(|_| {
                        let ty = &self.treatment_types[rng.random_range(0..self.treatment_types.len())];
                        ScheduledTreatment {
                            type_id: ty.type_id.clone(),
                            time: rng.random_range(self.treatment_window[0]..=self.treatment_window[1]),
                        }
                    })
                    .collect();
                schedule.sort_by(|a, b| a.time.total_cmp(&b.time));
                let covariates = self
                    .covariates
                    .iter()
                    .map(|c| {
                        let d = rng.random_range(c.d[0]..=c.d[1]);
                        let effects = self
                            .treatment_types
                            .iter()
                            .map(|t| {
                                let mag = rng.random_range(self.effect_magnitude[0]..=self.effect_magnitude[1]);
                                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                                (t.type_id.clone(), sign * mag)
                            })
                            .collect();
                        SimCovariate {
                            name: c.name.clone(),
                            b: c.b,
                            d,
                            effects,
                            baseline: c.baseline.clone(),
                            noise_var: c.noise_var,
                        }
                    })
                    .collect();
                Ok(SimConfig {
                    patient_id: format!("sim-{i:0width$}"),
                    covariates,
                    treatment_types: self.treatment_types.clone(),
                    schedule,
                    observations: self.observations.clone(),
                    grid_step: self.grid_step,
                    seed: mix_seed(seed, 0x5eed),
                    convention: self.convention,
                    canonical_force_sign: true,
                })
            })
            .collect()
    }
}

/// Simulate every patient of a cohort in parallel; output order follows patient index.
pub fn simulate_cohort(spec: &CohortSpec) -> Result<Vec<(SimConfig, SimOutput)>> {
    spec.configs()?
        .into_par_iter()
        .map(|c| {
            let out = simulate_patient(&c)?;
            Ok((c, out))
        })
        .collect()
}
