//! Patient records, CSV/JSON IO, normalization, splitting and cohort filters.
//!
//! CSV is long format, one row per observation or treatment event:
//!
//! ```text
//! patient_id,stream_kind,name,time_hours,value,dose,route
//! p1,observation,heart_rate,0,72.5,,
//! p1,treatment,metoprolol:25mg:oral,1.5,,25,oral
//! ```
//!
//! Demographics only survive the JSON format, which mirrors [`PatientRecord`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Series;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Oral,
    Injection,
    Infusion,
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::Oral => "oral",
            Route::Injection => "injection",
            Route::Infusion => "infusion",
        })
    }
}

impl FromStr for Route {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "oral" => Ok(Route::Oral),
            "injection" => Ok(Route::Injection),
            "infusion" => Ok(Route::Infusion),
            other => Err(Error::Input(format!("unknown route {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateSeries {
    pub name: String,
    pub observations: Vec<Observation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatmentEvent {
    pub time: f64,
    /// Drug, dose and route, e.g. `metoprolol:25mg:oral`. Distinct doses or
    /// routes are distinct types.
    pub treatment_type: String,
    pub dose: f64,
    pub route: Route,
}

impl TreatmentEvent {
    /// Drug name: the part of the type before the first `:`.
    pub fn drug(&self) -> &str {
        self.treatment_type.split(':').next().unwrap_or("")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub covariates: Vec<CovariateSeries>,
    #[serde(default)]
    pub treatments: Vec<TreatmentEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demographics: Option<BTreeMap<String, serde_json::Value>>,
}

impl PatientRecord {
    pub fn covariate_names(&self) -> Vec<String> {
        self.covariates.iter().map(|c| c.name.clone()).collect()
    }

    pub fn covariate(&self, name: &str) -> Option<&CovariateSeries> {
        self.covariates.iter().find(|c| c.name == name)
    }

    /// Observations as model input, in covariate order.
    pub fn series(&self) -> Vec<Series> {
        self.covariates
            .iter()
            .map(|c| {
                Series::new(
                    c.observations.iter().map(|o| o.time).collect(),
                    c.observations.iter().map(|o| o.value).collect(),
                )
            })
            .collect()
    }

    pub fn n_observations(&self) -> usize {
        self.covariates.iter().map(|c| c.observations.len()).sum()
    }

    /// Earliest observation time, if any.
    pub fn first_time(&self) -> Option<f64> {
        self.covariates
            .iter()
            .flat_map(|c| c.observations.iter().map(|o| o.time))
            .reduce(f64::min)
    }

    /// Shift all times so the first observation is at 0. Returns the shifted
    /// record and the subtracted offset. Treatments before the first
    /// observation get negative times.
    pub fn rebase_time(&self) -> (PatientRecord, f64) {
        let offset = self.first_time().unwrap_or(0.0);
        let mut r = self.clone();
        for c in &mut r.covariates {
            for o in &mut c.observations {
                o.time -= offset;
            }
        }
        for t in &mut r.treatments {
            t.time -= offset;
        }
        (r, offset)
    }

    pub fn without_treatments(&self) -> PatientRecord {
        PatientRecord {
            treatments: Vec::new(),
            ..self.clone()
        }
    }

    /// All contract violations of this record, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let id = &self.patient_id;
        for c in &self.covariates {
            for (i, o) in c.observations.iter().enumerate() {
                if !o.time.is_finite() {
                    v.push(format!("patient {id}, covariate {}, index {i}: time {} is not finite", c.name, o.time));
                }
                if !o.value.is_finite() {
                    v.push(format!("patient {id}, covariate {}, index {i}: value {} is not finite", c.name, o.value));
                }
            }
            for (i, w) in c.observations.windows(2).enumerate() {
                if w[1].time < w[0].time {
                    v.push(format!(
                        "patient {id}, covariate {}, index {}: time {} precedes {}",
                        c.name,
                        i + 1,
                        w[1].time,
                        w[0].time
                    ));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.covariates {
            if !seen.insert(&c.name) {
                v.push(format!("patient {id}: covariate {} appears twice", c.name));
            }
        }
        for (i, t) in self.treatments.iter().enumerate() {
            if !t.time.is_finite() {
                v.push(format!("patient {id}, treatment {i}: time {} is not finite", t.time));
            }
            if !(t.dose > 0.0 && t.dose.is_finite()) {
                v.push(format!("patient {id}, treatment {i}: dose {} must be positive", t.dose));
            }
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Json,
}

impl DataFormat {
    /// Format from the file extension (`.csv` or `.json`).
    pub fn from_path(path: &Path) -> Result<DataFormat> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("csv") => Ok(DataFormat::Csv),
            Some("json") => Ok(DataFormat::Json),
            _ => Err(Error::Input(format!(
                "cannot infer data format of {} (expected .csv or .json)",
                path.display()
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    /// Stable-sort unsorted observations with a warning instead of rejecting them.
    pub sort_and_warn: bool,
    /// Allowed covariate names; `None` accepts any.
    pub covariate_schema: Option<Vec<String>>,
}

/// Validate records against the contract; every violation is listed.
pub fn validate_records(records: &mut [PatientRecord], options: &LoadOptions) -> Result<()> {
    let mut violations = Vec::new();
    let mut type_signature: HashMap<String, (f64, Route)> = HashMap::new();
    for r in records.iter_mut() {
        if options.sort_and_warn {
            for c in &mut r.covariates {
                if c.observations.windows(2).any(|w| w[1].time < w[0].time) {
                    log::warn!("patient {}: sorting unsorted covariate {}", r.patient_id, c.name);
                    c.observations.sort_by(|a, b| a.time.total_cmp(&b.time));
                }
            }
        }
        violations.extend(r.violations());
        if let Some(schema) = &options.covariate_schema {
            for c in &r.covariates {
                if !schema.contains(&c.name) {
                    violations.push(format!("patient {}: unknown covariate {}", r.patient_id, c.name));
                }
            }
        }
        for t in &r.treatments {
            match type_signature.get(&t.treatment_type) {
                Some(&(dose, route)) if dose != t.dose || route != t.route => violations.push(format!(
                    "patient {}: treatment type {} has dose {} / route {} but was {dose} / {route} elsewhere",
                    r.patient_id, t.treatment_type, t.dose, t.route
                )),
                Some(_) => {}
                None => {
                    type_signature.insert(t.treatment_type.clone(), (t.dose, t.route));
                }
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(violations))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    patient_id: String,
    stream_kind: String,
    name: String,
    time_hours: f64,
    value: Option<f64>,
    dose: Option<f64>,
    route: Option<String>,
}

/// Parse long-format CSV without validating.
pub fn read_csv(reader: impl Read) -> Result<Vec<PatientRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut records: Vec<PatientRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (k, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let line = k + 2;
        let parse_err = |message: String| Error::Parse {
            context: format!("CSV line {line}"),
            message,
        };
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        let r = *index.entry(row.patient_id.clone()).or_insert_with(|| {
            records.push(PatientRecord {
                patient_id: row.patient_id.clone(),
                covariates: Vec::new(),
                treatments: Vec::new(),
                demographics: None,
            });
            records.len() - 1
        });
        let rec = &mut records[r];
        match row.stream_kind.as_str() {
            "observation" => {
                let value = row.value.ok_or_else(|| parse_err("observation row without a value".into()))?;
                let obs = Observation {
                    time: row.time_hours,
                    value,
                };
                match rec.covariates.iter_mut().find(|c| c.name == row.name) {
                    Some(c) => c.observations.push(obs),
                    None => rec.covariates.push(CovariateSeries {
                        name: row.name,
                        observations: vec![obs],
                    }),
                }
            }
            "treatment" => {
                let dose = row.dose.ok_or_else(|| parse_err("treatment row without a dose".into()))?;
                let route = row
                    .route
                    .as_deref()
                    .ok_or_else(|| parse_err("treatment row without a route".into()))?
                    .parse::<Route>()
                    .map_err(|e| parse_err(e.to_string()))?;
                rec.treatments.push(TreatmentEvent {
                    time: row.time_hours,
                    treatment_type: row.name,
                    dose,
                    route,
                });
            }
            other => return Err(parse_err(format!("unknown stream_kind {other:?}"))),
        }
    }
    Ok(records)
}

pub fn write_csv(writer: impl Write, records: &[PatientRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["patient_id", "stream_kind", "name", "time_hours", "value", "dose", "route"])
        .map_err(csv_err)?;
    for r in records {
        for c in &r.covariates {
            for o in &c.observations {
                w.write_record([
                    r.patient_id.as_str(),
                    "observation",
                    c.name.as_str(),
                    &o.time.to_string(),
                    &o.value.to_string(),
                    "",
                    "",
                ])
                .map_err(csv_err)?;
            }
        }
        for t in &r.treatments {
            w.write_record([
                r.patient_id.as_str(),
                "treatment",
                t.treatment_type.as_str(),
                &t.time.to_string(),
                "",
                &t.dose.to_string(),
                &t.route.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load and validate records.
pub fn load_records(path: &Path, format: DataFormat, options: &LoadOptions) -> Result<Vec<PatientRecord>> {
    let text = fs::read_to_string(path)?;
    let mut records = match format {
        DataFormat::Csv => read_csv(text.as_bytes())?,
        DataFormat::Json if text.trim().is_empty() => Vec::new(),
        DataFormat::Json => serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: format!("{} line {} column {}", path.display(), e.line(), e.column()),
            message: e.to_string(),
        })?,
    };
    validate_records(&mut records, options)?;
    Ok(records)
}

pub fn save_records(path: &Path, format: DataFormat, records: &[PatientRecord]) -> Result<()> {
    match format {
        DataFormat::Csv => write_csv(fs::File::create(path)?, records),
        DataFormat::Json => {
            let text = serde_json::to_string_pretty(records).map_err(|e| Error::Io(std::io::Error::other(e)))?;
            fs::write(path, text)?;
            Ok(())
        }
    }
}

/// Subtract each covariate's empirical mean. Returns the means in covariate order.
pub fn normalize(record: &PatientRecord) -> Result<(PatientRecord, Vec<f64>)> {
    let mut out = record.clone();
    let mut means = Vec::with_capacity(out.covariates.len());
    for c in &mut out.covariates {
        if c.observations.is_empty() {
            return Err(Error::ParameterDomain(format!(
                "patient {}: covariate {} is empty and cannot be normalized",
                record.patient_id, c.name
            )));
        }
        let mean = c.observations.iter().map(|o| o.value).sum::<f64>() / c.observations.len() as f64;
        for o in &mut c.observations {
            o.value -= mean;
        }
        means.push(mean);
    }
    Ok((out, means))
}

/// Undo [`normalize`] on one value.
pub fn denormalize(value: f64, mean: f64) -> f64 {
    value + mean
}

/// Number of training observations out of `n` for `fraction`.
pub fn train_count(n: usize, fraction: f64) -> usize {
    // The guard keeps products like 0.7 * 10 = 6.9999... at 7.
    ((fraction * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Per covariate, the first `floor(fraction * T)` observations in time order
/// (stable for ties) go to train and the rest to test. Treatments are kept in both.
pub fn split_train_test(record: &PatientRecord, fraction: f64) -> Result<(PatientRecord, PatientRecord)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::ParameterDomain(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let mut train = record.clone();
    let mut test = record.clone();
    for ((c, tr), te) in record.covariates.iter().zip(&mut train.covariates).zip(&mut test.covariates) {
        let mut obs = c.observations.clone();
        obs.sort_by(|a, b| a.time.total_cmp(&b.time));
        let k = train_count(obs.len(), fraction);
        te.observations = obs.split_off(k);
        tr.observations = obs;
    }
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CohortCriterion {
    /// Every listed covariate needs at least `min` observations.
    MinObservations { covariates: Vec<String>, min: usize },
    /// Drop treatment events of any other type.
    AllowedTreatmentTypes { types: Vec<String> },
    /// Drop all events of treatment types seen fewer than `min` times across the cohort.
    MinGlobalTreatmentCount { min: usize },
    /// Drop records containing any event whose drug is in `drugs`.
    ExcludeCoadministered { drugs: Vec<String> },
    /// Drop records left without treatment events.
    RequireTreatment,
}

impl fmt::Display for CohortCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CohortCriterion::MinObservations { covariates, min } => {
                write!(f, "min_observations({} >= {min})", covariates.join(","))
            }
            CohortCriterion::AllowedTreatmentTypes { types } => write!(f, "allowed_treatment_types({})", types.join(",")),
            CohortCriterion::MinGlobalTreatmentCount { min } => write!(f, "min_global_treatment_count({min})"),
            CohortCriterion::ExcludeCoadministered { drugs } => write!(f, "exclude_coadministered({})", drugs.join(",")),
            CohortCriterion::RequireTreatment => f.write_str("require_treatment"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttritionStep {
    pub criterion: String,
    pub records_in: usize,
    pub records_out: usize,
    pub events_in: usize,
    pub events_out: usize,
}

fn count_events(records: &[PatientRecord]) -> usize {
    records.iter().map(|r| r.treatments.len()).sum()
}

/// Apply `criteria` in order, reporting attrition after each.
pub fn cohort_filter(records: &[PatientRecord], criteria: &[CohortCriterion]) -> (Vec<PatientRecord>, Vec<AttritionStep>) {
    let mut current = records.to_vec();
    let mut report = Vec::with_capacity(criteria.len());
    for c in criteria {
        let (records_in, events_in) = (current.len(), count_events(&current));
        match c {
            CohortCriterion::MinObservations { covariates, min } => current.retain(|r| {
                covariates
                    .iter()
                    .all(|name| r.covariate(name).map_or(0, |s| s.observations.len()) >= *min)
            }),
            CohortCriterion::AllowedTreatmentTypes { types } => {
                for r in &mut current {
                    r.treatments.retain(|t| types.contains(&t.treatment_type));
                }
            }
            CohortCriterion::MinGlobalTreatmentCount { min } => {
                let mut counts: HashMap<String, usize> = HashMap::new();
                for t in current.iter().flat_map(|r| &r.treatments) {
                    *counts.entry(t.treatment_type.clone()).or_default() += 1;
                }
                for r in &mut current {
                    r.treatments.retain(|t| counts[&t.treatment_type] >= *min);
                }
            }
            CohortCriterion::ExcludeCoadministered { drugs } => {
                current.retain(|r| !r.treatments.iter().any(|t| drugs.iter().any(|d| d == t.drug())))
            }
            CohortCriterion::RequireTreatment => current.retain(|r| !r.treatments.is_empty()),
        }
        report.push(AttritionStep {
            criterion: c.to_string(),
            records_in,
            records_out: current.len(),
            events_in,
            events_out: count_events(&current),
        });
    }
    (current, report)
}
