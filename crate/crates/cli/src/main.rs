use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use serde_json::json;
use txforce::config::RunConfig;
use txforce::data::{load_records, save_records, DataFormat, PatientRecord};
use txforce::eval::{
    fit_record, gradcheck, oracle_check, run_experiment, to_json, EvalReport, Method, OracleOptions, PatientFit,
};
use txforce::sim::{simulate_cohort, simulate_patient};
use txforce::{Error, ForceConvention};

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_ACCEPTANCE: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "txforce", version, about = "Causal latent-force GPs for treatment-response time series")]
struct Cli {
    /// Run configuration (.toml or .json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the fit seed, and the simulation seed for `simulate`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for all file outputs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// proposed, se-per or ou-exp. `evaluate` runs all three when omitted.
    #[arg(long, global = true, value_parser = parse_method)]
    method: Option<Method>,

    #[arg(long = "force-convention", global = true, value_enum)]
    force_convention: Option<ConventionArg>,

    /// -v info, -vv debug.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConventionArg {
    Zeroed,
    Unzeroed,
}

impl From<ConventionArg> for ForceConvention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::Zeroed => ForceConvention::Zeroed,
            ConventionArg::Unzeroed => ForceConvention::Unzeroed,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample synthetic patients from the config's `cohort` (or `sim`) section.
    Simulate {
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
    },
    /// Fit one model per patient on the whole record; writes `fits/<patient>.json`.
    Fit {
        /// Dataset (.csv or .json).
        data: PathBuf,
        /// Only this patient.
        #[arg(long)]
        patient: Option<String>,
    },
    /// Posterior predictions from fits written by `fit`.
    Predict {
        data: PathBuf,
        /// Directory holding `<patient>.json` fit files.
        #[arg(long)]
        fits: PathBuf,
        /// Comma-separated query times (original time axis). Default: an even grid.
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        /// Grid size when `--times` is absent.
        #[arg(long, default_value_t = 200)]
        points: usize,
        /// Include observation noise in the predictive variance.
        #[arg(long)]
        with_noise: bool,
    },
    /// Run the 70/30 evaluation protocol; writes report.json and trajectories.
    Evaluate { data: PathBuf },
    /// Compare closed-form covariances against quadrature.
    OracleCheck {
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Compare analytic NLL gradients against central differences.
    Gradcheck {
        #[arg(long)]
        cases: Option<usize>,
    },
}

fn parse_method(s: &str) -> Result<Method, Error> {
    s.parse()
}

enum Failure {
    Error(Error),
    Acceptance(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(Error::Io(e))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Acceptance(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_ACCEPTANCE)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            if let Error::Numerical { diagnostics, .. } = &e {
                eprintln!("  {diagnostics}");
            }
            ExitCode::from(if e.is_input() { EXIT_INPUT } else { EXIT_NUMERICAL })
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.fit.seed = seed;
    }
    if let Some(c) = cli.force_convention {
        config.fit.convention = c.into();
    }
    config.validate()?;
    Ok(config)
}

fn load_data(path: &Path, config: &RunConfig) -> Result<Vec<PatientRecord>, Error> {
    load_records(path, DataFormat::from_path(path)?, &config.load)
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Simulate { format } => simulate(cli, config, *format),
        Command::Fit { data, patient } => fit(cli, &config, data, patient.as_deref()),
        Command::Predict {
            data,
            fits,
            times,
            points,
            with_noise,
        } => predict(cli, &config, data, fits, times.as_deref(), *points, *with_noise),
        Command::Evaluate { data } => evaluate(cli, &config, data),
        Command::OracleCheck { cases } => {
            let n = cases.unwrap_or(config.oracle.cases);
            let mut options = OracleOptions::default();
            if let Some(c) = cli.force_convention {
                options.conventions = vec![c.into()];
            }
            let report = oracle_check(n, config.fit.seed, &config.oracle, &options)?;
            write(&cli.out.join("oracle.json"), &to_json(&report)?)?;
            for s in &report.strata {
                println!(
                    "{:<8} {:<10} {:?}: {} cases, max deviation {:.3e} (tol {:.1e}), {} failures",
                    s.quantity,
                    format!("{:?}", s.convention),
                    s.ordering,
                    s.cases,
                    s.max_deviation,
                    s.tolerance,
                    s.failures.len()
                );
            }
            if report.passed {
                println!("oracle check passed");
                Ok(())
            } else {
                Err(Failure::Acceptance("closed forms disagree with quadrature".into()))
            }
        }
        Command::Gradcheck { cases } => {
            let mut settings = config.gradcheck.clone();
            if let Some(n) = cases {
                settings.cases = *n;
            }
            let report = gradcheck(&settings, config.fit.seed, config.fit.convention)?;
            write(&cli.out.join("gradcheck.json"), &to_json(&report)?)?;
            println!(
                "{} cases, {} coordinates, max relative error {:.3e}, {} mismatches",
                report.cases,
                report.coordinates,
                report.max_relative_error,
                report.mismatches.len()
            );
            if report.passed {
                Ok(())
            } else {
                Err(Failure::Acceptance("analytic gradient disagrees with central differences".into()))
            }
        }
    }
}

fn simulate(cli: &Cli, config: RunConfig, format: FormatArg) -> Result<(), Failure> {
    let convention = cli.force_convention.map(ForceConvention::from);
    let outputs = if let Some(mut spec) = config.cohort {
        if let Some(seed) = cli.seed {
            spec.seed = seed;
        }
        if let Some(c) = convention {
            spec.convention = c;
        }
        simulate_cohort(&spec)?
    } else if let Some(mut sim) = config.sim {
        if let Some(seed) = cli.seed {
            sim.seed = seed;
        }
        if let Some(c) = convention {
            sim.convention = c;
        }
        let out = simulate_patient(&sim)?;
        vec![(sim, out)]
    } else {
        return Err(Error::Config("simulate needs a `cohort` or `sim` section in --config".into()).into());
    };

    let records: Vec<PatientRecord> = outputs.iter().map(|(_, o)| o.record.clone()).collect();
    let (name, fmt) = match format {
        FormatArg::Json => ("records.json", DataFormat::Json),
        FormatArg::Csv => ("records.csv", DataFormat::Csv),
    };
    fs::create_dir_all(&cli.out)?;
    save_records(&cli.out.join(name), fmt, &records)?;
    let truth: Vec<_> = outputs
        .iter()
        .map(|(c, o)| {
            Ok(json!({
                "patient_id": c.patient_id,
                "config": c,
                "model": c.truth_model()?,
                "flipped": o.trace.flipped,
            }))
        })
        .collect::<Result<_, Error>>()?;
    write(&cli.out.join("truth.json"), &to_json(&truth)?)?;
    for (c, o) in &outputs {
        write(
            &cli.out.join("traces").join(format!("{}.json", file_stem(&c.patient_id))),
            &to_json(&o.trace)?,
        )?;
    }
    println!("simulated {} patient(s) into {}", records.len(), cli.out.display());
    Ok(())
}

fn fit(cli: &Cli, config: &RunConfig, data: &Path, patient: Option<&str>) -> Result<(), Failure> {
    let method = cli.method.unwrap_or(Method::Proposed);
    let records = load_data(data, config)?;
    let chosen: Vec<&PatientRecord> = records
        .iter()
        .filter(|r| patient.is_none_or(|p| r.patient_id == p))
        .collect();
    if chosen.is_empty() {
        return Err(Error::Input(match patient {
            Some(p) => format!("patient {p:?} not in {}", data.display()),
            None => format!("{} holds no records", data.display()),
        })
        .into());
    }
    let mut failed = None;
    for r in chosen {
        match fit_record(r, method, config) {
            Ok(f) => {
                let path = cli.out.join("fits").join(format!("{}.json", file_stem(&r.patient_id)));
                write(&path, &to_json(&f)?)?;
                println!("{} {method}: objective {:.6}", r.patient_id, f.fitted.objective());
            }
            Err(e) => {
                eprintln!("{} {method}: {e}", r.patient_id);
                failed.get_or_insert(e);
            }
        }
    }
    match failed {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn predict(
    cli: &Cli,
    config: &RunConfig,
    data: &Path,
    fits: &Path,
    times: Option<&[f64]>,
    points: usize,
    with_noise: bool,
) -> Result<(), Failure> {
    if times.is_none() && points < 2 {
        return Err(Error::Input("--points must be at least 2".into()).into());
    }
    let records = load_data(data, config)?;
    let mut rows = csv::Writer::from_writer(Vec::new());
    rows.write_record(["patient_id", "covariate", "time", "mean", "variance"]).map_err(csv_error)?;
    let mut forces = csv::Writer::from_writer(Vec::new());
    forces
        .write_record(["patient_id", "treatment", "treatment_type", "time", "mean", "variance"])
        .map_err(csv_error)?;
    let mut n = 0;
    for r in &records {
        let path = fits.join(format!("{}.json", file_stem(&r.patient_id)));
        if !path.exists() {
            log::warn!("no fit for patient {} at {}", r.patient_id, path.display());
            continue;
        }
        let text = fs::read_to_string(&path)?;
        let fit: PatientFit = serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })?;
        let query = match times {
            Some(t) => t.to_vec(),
            None => grid(r, points),
        };
        for (j, name) in fit.covariates.iter().enumerate() {
            let post = fit.predict(r, j, &query, with_noise)?;
            for k in 0..query.len() {
                rows.write_record([
                    r.patient_id.clone(),
                    name.clone(),
                    query[k].to_string(),
                    post.mean[k].to_string(),
                    post.variance[k].to_string(),
                ])
                .map_err(csv_error)?;
            }
        }
        if matches!(fit.fitted, txforce::eval::Fitted::Proposed(_)) {
            for (m, t) in r.treatments.iter().enumerate() {
                let post = fit.latent_force(r, m, &query)?;
                for k in 0..query.len() {
                    forces
                        .write_record([
                            r.patient_id.clone(),
                            m.to_string(),
                            t.treatment_type.clone(),
                            query[k].to_string(),
                            post.force.mean[k].to_string(),
                            post.force.variance[k].to_string(),
                        ])
                        .map_err(csv_error)?;
                }
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Input(format!("no fit files in {} match {}", fits.display(), data.display())).into());
    }
    write(&cli.out.join("predictions.csv"), &finish(rows)?)?;
    write(&cli.out.join("forces.csv"), &finish(forces)?)?;
    println!("predicted {n} patient(s) into {}", cli.out.display());
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String, Error> {
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Even grid over the record's observation span.
fn grid(record: &PatientRecord, points: usize) -> Vec<f64> {
    let times = record.covariates.iter().flat_map(|c| c.observations.iter().map(|o| o.time));
    let (lo, hi) = times.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
    if !lo.is_finite() {
        return Vec::new();
    }
    (0..points).map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64).collect()
}

fn evaluate(cli: &Cli, config: &RunConfig, data: &Path) -> Result<(), Failure> {
    let methods: Vec<Method> = match cli.method {
        Some(m) => vec![m],
        None => Method::ALL.to_vec(),
    };
    let records = load_data(data, config)?;
    let report = run_experiment(&records, &methods, config, Some(&cli.out))?;
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &EvalReport) {
    println!("{} patient(s) after filters", report.n_patients);
    for m in &report.methods {
        for s in &m.summary {
            let mean = s.mean.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            let se = s.standard_error.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!("{:<9} {:<12} MAE {mean} ± {se} (n = {})", m.method.to_string(), s.covariate, s.patients);
        }
        if m.failures > 0 {
            println!("{:<9} {} patient fit(s) failed", m.method.to_string(), m.failures);
        }
    }
}
