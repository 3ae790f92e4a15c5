//! Shared fixtures for the criterion benches.

use std::path::Path;

use txforce::config::RunConfig;
use txforce::sim::simulate_cohort;
use txforce::{GpModel, PatientRecord, Series};

/// First patient of the shipped recovery benchmark cohort: 2 covariates,
/// 60 observations each, with its ground-truth model.
pub fn benchmark_patient() -> (GpModel, Vec<Series>, PatientRecord) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/recovery_benchmark.toml");
    let config = RunConfig::load(&path).expect("benchmark config loads");
    let mut spec = config.cohort.expect("benchmark config has a cohort");
    spec.patients = 1;
    let (sim, out) = simulate_cohort(&spec).expect("simulation succeeds").remove(0);
    let model = sim.truth_model().expect("truth model");
    let series = out.record.series();
    (model, series, out.record)
}
