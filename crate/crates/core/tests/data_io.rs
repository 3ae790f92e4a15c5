use std::fs;

use proptest::prelude::*;
use txforce::data::{
    cohort_filter, denormalize, load_records, normalize, save_records, split_train_test, CohortCriterion,
    CovariateSeries, DataFormat, LoadOptions, Observation,
};
use txforce::{Error, PatientRecord, Route, TreatmentEvent};

fn record(id: &str, series: &[(&str, Vec<(f64, f64)>)], treatments: &[(&str, f64)]) -> PatientRecord {
    PatientRecord {
        patient_id: id.into(),
        covariates: series
            .iter()
            .map(|(name, obs)| CovariateSeries {
                name: name.to_string(),
                observations: obs.iter().map(|&(time, value)| Observation { time, value }).collect(),
            })
            .collect(),
        treatments: treatments
            .iter()
            .map(|&(ty, time)| TreatmentEvent {
                time,
                treatment_type: ty.into(),
                dose: 5.0,
                route: Route::Oral,
            })
            .collect(),
        demographics: None,
    }
}

fn cohort() -> Vec<PatientRecord> {
    vec![
        record(
            "p1",
            &[("hr", vec![(0.0, 80.0), (1.5, 82.25), (3.0, 79.0)]), ("sbp", vec![(0.5, 120.0)])],
            &[("metoprolol:25mg:oral", 1.0)],
        ),
        record("p2", &[("hr", vec![(2.0, 1e-7), (2.0, -3.5)])], &[]),
        record(
            "p3",
            &[("hr", vec![(0.0, 61.0)])],
            &[("metoprolol:25mg:oral", 0.5), ("heparin:5u:oral", 0.7)],
        ),
    ]
}

#[test]
fn records_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let records = cohort();
    for (format, name) in [(DataFormat::Json, "r.json"), (DataFormat::Csv, "r.csv")] {
        let path = dir.path().join(name);
        save_records(&path, format, &records).unwrap();
        assert_eq!(DataFormat::from_path(&path).unwrap(), format);
        let back = load_records(&path, format, &LoadOptions::default()).unwrap();
        assert_eq!(back, records, "{format:?}");
    }
}

#[test]
fn non_finite_values_are_rejected_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(
        &path,
        "patient_id,stream_kind,name,time_hours,value,dose,route\np1,observation,hr,0,80,,\np1,observation,hr,1,NaN,,\n",
    )
    .unwrap();
    match load_records(&path, DataFormat::Csv, &LoadOptions::default()) {
        Err(Error::Validation(v)) => {
            assert_eq!(v.len(), 1);
            assert!(v[0].contains("p1") && v[0].contains("hr") && v[0].contains("index 1"), "{}", v[0]);
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn empty_files_load_as_empty_cohorts() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("e.csv");
    fs::write(&csv, "patient_id,stream_kind,name,time_hours,value,dose,route\n").unwrap();
    assert!(load_records(&csv, DataFormat::Csv, &LoadOptions::default()).unwrap().is_empty());
    let json = dir.path().join("e.json");
    fs::write(&json, "").unwrap();
    assert!(load_records(&json, DataFormat::Json, &LoadOptions::default()).unwrap().is_empty());
}

#[test]
fn unsorted_input_is_rejected_unless_sorting_is_requested() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("u.json");
    let records = vec![record("p", &[("hr", vec![(2.0, 1.0), (1.0, 2.0)])], &[])];
    save_records(&path, DataFormat::Json, &records).unwrap();
    assert!(matches!(
        load_records(&path, DataFormat::Json, &LoadOptions::default()),
        Err(Error::Validation(_))
    ));
    let options = LoadOptions {
        sort_and_warn: true,
        ..LoadOptions::default()
    };
    let sorted = load_records(&path, DataFormat::Json, &options).unwrap();
    assert_eq!(sorted[0].covariates[0].observations[0].time, 1.0);
}

#[test]
fn each_filter_reports_its_attrition() {
    let criteria = vec![
        CohortCriterion::MinObservations {
            covariates: vec!["hr".into()],
            min: 2,
        },
        CohortCriterion::ExcludeCoadministered {
            drugs: vec!["heparin".into()],
        },
        CohortCriterion::RequireTreatment,
    ];
    let (kept, steps) = cohort_filter(&cohort(), &criteria);
    assert_eq!(kept.iter().map(|r| r.patient_id.as_str()).collect::<Vec<_>>(), ["p1"]);
    assert_eq!(
        steps.iter().map(|s| (s.records_in, s.records_out)).collect::<Vec<_>>(),
        [(3, 2), (2, 2), (2, 1)]
    );
}

fn arb_record() -> impl Strategy<Value = PatientRecord> {
    let series = prop::collection::vec((0.0f64..100.0, -1e3f64..1e3), 1..30).prop_map(|mut obs| {
        obs.sort_by(|a, b| a.0.total_cmp(&b.0));
        obs
    });
    (series.clone(), series, prop::collection::vec(0.0f64..100.0, 0..4)).prop_map(|(a, b, marks)| {
        let treatments: Vec<(&str, f64)> = marks
            .iter()
            .enumerate()
            .map(|(k, &t)| (if k % 2 == 0 { "a:1mg:oral" } else { "b:2mg:oral" }, t))
            .collect();
        record("p", &[("x", a), ("y", b)], &treatments)
    })
}

fn arb_criterion() -> impl Strategy<Value = CohortCriterion> {
    prop_oneof![
        (0usize..20).prop_map(|min| CohortCriterion::MinObservations {
            covariates: vec!["x".into()],
            min
        }),
        Just(CohortCriterion::RequireTreatment),
        (0usize..3).prop_map(|min| CohortCriterion::MinGlobalTreatmentCount { min }),
        Just(CohortCriterion::ExcludeCoadministered { drugs: vec!["b".into()] }),
        Just(CohortCriterion::AllowedTreatmentTypes {
            types: vec!["a:1mg:oral".into()]
        }),
    ]
}

proptest! {
    #[test]
    fn split_concatenates_to_the_original(r in arb_record(), fraction in 0.05f64..0.95) {
        let (train, test) = split_train_test(&r, fraction).unwrap();
        for ((c, tr), te) in r.covariates.iter().zip(&train.covariates).zip(&test.covariates) {
            let joined: Vec<Observation> = tr.observations.iter().chain(&te.observations).copied().collect();
            prop_assert_eq!(&joined, &c.observations);
            prop_assert_eq!(tr.observations.len(), (fraction * c.observations.len() as f64 + 1e-9).floor() as usize);
        }
        prop_assert_eq!(&train.treatments, &r.treatments);
        prop_assert_eq!(&test.treatments, &r.treatments);
    }

    #[test]
    fn normalization_round_trips(r in arb_record()) {
        let (n, means) = normalize(&r).unwrap();
        for ((c, nc), mean) in r.covariates.iter().zip(&n.covariates).zip(&means) {
            let centred: f64 = nc.observations.iter().map(|o| o.value).sum();
            prop_assert!(centred.abs() <= 1e-9 * c.observations.len() as f64 * mean.abs().max(1.0));
            for (o, no) in c.observations.iter().zip(&nc.observations) {
                prop_assert!((denormalize(no.value, *mean) - o.value).abs() <= 1e-10 * o.value.abs().max(1.0));
                prop_assert_eq!(o.time, no.time);
            }
        }
    }

    #[test]
    fn adding_a_criterion_never_grows_the_cohort(
        records in prop::collection::vec(arb_record(), 0..6),
        criteria in prop::collection::vec(arb_criterion(), 0..4),
        extra in arb_criterion(),
    ) {
        let records: Vec<PatientRecord> = records
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                r.patient_id = format!("p{i}");
                r
            })
            .collect();
        let (before, _) = cohort_filter(&records, &criteria);
        let mut more = criteria.clone();
        more.push(extra);
        let (after, steps) = cohort_filter(&records, &more);
        prop_assert!(after.len() <= before.len());
        prop_assert!(steps.iter().all(|s| s.records_out <= s.records_in));
    }
}
