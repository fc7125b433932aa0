use std::collections::BTreeSet;
use std::fs;

use chrono::NaiveDate;
use proptest::prelude::*;
use sensorformer::data::{
    extract_window, load_dataset, plan_split, select_finetune_cohort, temporal_split, write_dataset, FileFormat,
    SplitSpec, Task, WindowSpec,
};
use sensorformer::synth::{CohortConfig, CohortGenerator};
use sensorformer::{Error, ErrorCategory};

fn cohort(n: usize, days: usize, seed: u64) -> sensorformer::Dataset {
    CohortGenerator::new(CohortConfig {
        n_participants: n,
        n_days: days,
        symptom_prevalence: 0.1,
        seed,
        ..Default::default()
    })
    .unwrap()
    .generate()
    .unwrap()
    .dataset
}

#[test]
fn writer_reader_round_trip() {
    let ds = cohort(2, 8, 1);
    for format in [FileFormat::Csv, FileFormat::Jsonl] {
        let dir = tempfile::tempdir().unwrap();
        let (sensors, labels) = write_dataset(&ds, dir.path(), format).unwrap();
        let back = load_dataset(&sensors, &labels).unwrap();
        assert_eq!(back.participants.len(), 2);
        for p in &back.participants {
            assert_eq!(p.series.steps.len(), 8 * 1440);
        }
        assert_eq!(back, ds);
    }
}

const SENSOR_HEADER: &str = "participant_id,timestamp_utc,steps,heart_rate,sleep\n";
const LABEL_HEADER: &str = "participant_id,date,flu_symptoms,kit_trigger,flu_positive,fatigue\n";

fn write_files(sensors: &str, labels: &str) -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("sensors.csv");
    let l = dir.path().join("labels.csv");
    fs::write(&s, format!("{SENSOR_HEADER}{sensors}")).unwrap();
    fs::write(&l, format!("{LABEL_HEADER}{labels}")).unwrap();
    (dir, s, l)
}

#[test]
fn empty_heart_rate_field_is_missing() {
    let (_dir, s, l) = write_files(
        "a,2020-03-01T00:00:00Z,5,,0\na,2020-03-01T00:01:00Z,0,61,1\n",
        "a,2020-03-01,0,0,,1\n",
    );
    let ds = load_dataset(&s, &l).unwrap();
    let p = &ds.participants[0].series;
    assert!(p.missing_hr[0]);
    assert_eq!(p.heart_rate[0], 0.0);
    assert_eq!(p.steps[0], 5.0);
    assert!(!p.missing_steps[0]);
    assert_eq!(p.heart_rate[1], 61.0);
    assert!(p.sleep[1]);
    // minutes without a row are missing in every stream
    assert!(p.missing_steps[2] && p.missing_hr[2] && p.missing_sleep[2]);
}

#[test]
fn duplicate_minute_names_the_minute() {
    let (_dir, s, l) = write_files(
        "a,2020-03-01T00:00:00Z,5,60,0\na,2020-03-01T00:07:00Z,1,60,0\na,2020-03-01T00:07:00Z,2,60,0\n",
        "",
    );
    let err = load_dataset(&s, &l).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("2020-03-01 00:07"), "{msg}");
    assert!(msg.contains("sensors.csv:4"), "{msg}");
    assert_eq!(err.category(), ErrorCategory::Validation);
}

#[test]
fn load_errors() {
    let (_d, s, l) = write_files(
        "a,2020-03-01T00:05:00Z,5,60,0\na,2020-03-01T00:01:00Z,1,60,0\n",
        "",
    );
    assert!(load_dataset(&s, &l).unwrap_err().to_string().contains("monotonic"));

    let (_d, s, l) = write_files("a,2020-03-01T00:00:00Z,5,60,0\n", "b,2020-03-01,0,0,,0\n");
    assert!(load_dataset(&s, &l).unwrap_err().to_string().contains("unknown participant"));

    let (_d, s, l) = write_files(
        "a,2020-03-01T00:00:00Z,5,60,0\n",
        "a,2020-03-01,0,0,,0\na,2020-03-01,1,0,,0\n",
    );
    assert!(load_dataset(&s, &l).unwrap_err().to_string().contains("overlapping"));

    let (_d, s, l) = write_files("a,2020-03-01T00:00:00Z,-1,60,0\n", "");
    assert!(matches!(load_dataset(&s, &l), Err(Error::Parse { .. }) | Err(Error::Validation(_))));
}

#[test]
fn split_boundary_and_tuning_fraction() {
    let ds = cohort(100, 120, 2);
    let spec = SplitSpec {
        boundary_day: ds.date_of(60),
        tuning_fraction: 0.1,
        seed: 4,
    };
    let plan = plan_split(&ds, &spec, Task::Fatigue, 4).unwrap();
    assert!(plan.train.iter().all(|k| k.day <= 59 && k.day >= 4));
    assert!(plan.tuning.iter().chain(&plan.test).all(|k| k.day >= 64));
    let users: BTreeSet<usize> = plan.tuning_users.iter().chain(&plan.test_users).copied().collect();
    assert_eq!(users.len(), 100);
    assert_eq!(plan.tuning_users.len(), 10);
    let again = plan_split(&ds, &spec, Task::Fatigue, 4).unwrap();
    assert_eq!(plan, again);

    let bad = SplitSpec {
        boundary_day: ds.start_day,
        ..spec
    };
    assert_eq!(plan_split(&ds, &bad, Task::Fatigue, 4).unwrap_err().category(), ErrorCategory::Validation);
    let late = SplitSpec {
        boundary_day: ds.date_of(119),
        ..spec
    };
    assert!(plan_split(&ds, &late, Task::Fatigue, 4).is_err());
}

#[test]
fn finetune_cohort_from_study_scale_population() {
    let users: Vec<usize> = (0..983).collect();
    let (c, h) = select_finetune_cohort(&users, 12, 7).unwrap();
    assert_eq!(c.len(), 12);
    assert_eq!(h.len(), 971);
    assert!(c.iter().all(|u| h.binary_search(u).is_err()));
    assert_eq!(select_finetune_cohort(&users, 12, 7).unwrap().0, c);
}

fn arb_cohort() -> impl Strategy<Value = (sensorformer::Dataset, usize, usize)> {
    (3usize..8, 10usize..20, any::<u64>(), 1usize..4).prop_map(|(n, days, seed, lookback)| {
        let ds = CohortGenerator::new(CohortConfig {
            n_participants: n,
            n_days: days,
            symptom_prevalence: 0.2,
            missing_minute_rate: 0.1,
            missing_day_rate: 0.2,
            seed,
            ..Default::default()
        })
        .unwrap()
        .generate()
        .unwrap()
        .dataset;
        (ds, days / 2, lookback)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn windows_are_zero_filled_and_precede_their_target(
        (ds, boundary, lookback) in arb_cohort(),
        res in prop::sample::select(vec![60usize, 120, 240]),
    ) {
        let spec = WindowSpec { lookback_days: lookback, resolution_minutes: res };
        let len = spec.length();
        for p in &ds.participants {
            for day in 0..ds.n_days {
                let target = ds.date_of(day);
                let w = extract_window(&p.series, &p.labels, target, Task::FluSymptoms, spec);
                prop_assert_eq!(w.is_some(), day >= lookback);
                let Some(w) = w else { continue };
                prop_assert!(w.first_day + chrono::Duration::days(lookback as i64) == target);
                let d = w.channels.data();
                for c in 0..3 {
                    for t in 0..len {
                        if d[(c + 3) * len + t] == 1.0 {
                            prop_assert_eq!(d[c * len + t], 0.0);
                        }
                    }
                }
            }
        }
        let _ = boundary;
    }

    #[test]
    fn split_sides_are_disjoint_and_respect_the_boundary((ds, boundary, lookback) in arb_cohort(), seed in any::<u64>()) {
        let spec = SplitSpec { boundary_day: ds.date_of(boundary), tuning_fraction: 0.3, seed };
        let Ok(plan) = plan_split(&ds, &spec, Task::Fatigue, lookback) else { return Ok(()) };
        let key = |k: &sensorformer::ExampleKey| (k.participant, k.day);
        let train: BTreeSet<_> = plan.train.iter().map(key).collect();
        let tuning: BTreeSet<_> = plan.tuning.iter().map(key).collect();
        let test: BTreeSet<_> = plan.test.iter().map(key).collect();
        prop_assert!(train.is_disjoint(&tuning) && train.is_disjoint(&test) && tuning.is_disjoint(&test));
        let tu: BTreeSet<_> = plan.tuning.iter().map(|k| k.participant).collect();
        let te: BTreeSet<_> = plan.test.iter().map(|k| k.participant).collect();
        prop_assert!(tu.is_disjoint(&te));
        // train windows end before the boundary, test-period windows start on or after it
        for k in &plan.train {
            prop_assert!(k.day < boundary && k.day >= lookback);
        }
        for k in plan.tuning.iter().chain(&plan.test) {
            prop_assert!(k.day - lookback >= boundary);
        }
        let windows = temporal_split(&ds, &spec, Task::Fatigue, WindowSpec { lookback_days: lookback, resolution_minutes: 60 }).unwrap();
        prop_assert_eq!(windows.train.len(), plan.train.len());
        for w in &windows.train {
            prop_assert!(w.target_day < spec.boundary_day);
        }
        for w in windows.tuning.iter().chain(&windows.test) {
            prop_assert!(w.first_day >= spec.boundary_day);
        }
    }
}

#[test]
fn labels_for_unscored_days_are_absent() {
    let day = NaiveDate::from_ymd_opt(2020, 3, 5).unwrap();
    let (_d, s, l) = write_files(
        "a,2020-03-01T00:00:00Z,5,60,0\n",
        "a,2020-03-05,1,1,1,\n",
    );
    let ds = load_dataset(&s, &l).unwrap();
    let p = &ds.participants[0];
    let w = extract_window(&p.series, &p.labels, day, Task::FluPositivity, WindowSpec::default()).unwrap();
    assert_eq!(w.label, Some(true));
    let w = extract_window(&p.series, &p.labels, day, Task::Fatigue, WindowSpec::default()).unwrap();
    assert_eq!(w.label, None);
}
