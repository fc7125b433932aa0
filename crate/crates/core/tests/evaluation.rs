mod common;

use chrono::NaiveDate;
use common::{pairwise_auc, random_instance, rng};
use proptest::prelude::*;
use sensorformer::data::{plan_split, select_finetune_cohort};
use sensorformer::evaluation::{
    compare_runs, evaluate_checkpoint, evaluate_windows, export_roc_curve, read_roc_curve, roc_auc, roc_curve,
    trapezoid_area, LeakageGuard, Prediction, PredictionSet,
};
use sensorformer::model::{ConvSpec, ModelConfig};
use sensorformer::training::{finetune, train_task, TrainConfig};
use sensorformer::{CohortConfig, CohortGenerator, Error, ErrorCategory, SplitSpec, Task, Tensor, Window, WindowSpec};

#[test]
fn auc_matches_pairwise_oracle_exactly() {
    let mut r = rng(42);
    for _ in 0..1000 {
        let (s, y) = random_instance(&mut r);
        assert_eq!(roc_auc(&s, &y).unwrap(), pairwise_auc(&s, &y));
    }
}

#[test]
fn auc_edge_cases() {
    assert_eq!(roc_auc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
    assert_eq!(roc_auc(&[0.5; 4], &[false, true, true, false]).unwrap(), 0.5);
    assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    assert!(matches!(roc_auc(&[f64::NAN, 0.2], &[true, false]), Err(Error::UndefinedMetric(_))));
    assert!(roc_auc(&[0.1], &[true, false]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auc_is_invariant_to_monotone_maps(seed in 0u64..10_000) {
        let (s, y) = random_instance(&mut rng(seed));
        let a = roc_auc(&s, &y).unwrap();
        let mapped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + 7.0).collect();
        prop_assert_eq!(roc_auc(&mapped, &y).unwrap(), a);
        let negated: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((roc_auc(&negated, &y).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn curve_area_equals_auc(seed in 0u64..10_000) {
        let (s, y) = random_instance(&mut rng(seed));
        let curve = roc_curve(&s, &y).unwrap();
        prop_assert!((trapezoid_area(&curve) - roc_auc(&s, &y).unwrap()).abs() <= 1e-9);
        prop_assert_eq!((curve[0].fpr, curve[0].tpr), (0.0, 0.0));
        let last = curve.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in curve.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            prop_assert!(w[1].threshold < w[0].threshold);
        }
    }
}

#[test]
fn collinear_vertices_are_dropped() {
    // all negatives below all positives: the curve is the two-segment corner
    let s = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9];
    let y = [false, false, false, true, true, true];
    let c = roc_curve(&s, &y).unwrap();
    let pts: Vec<(f64, f64)> = c.iter().map(|p| (p.fpr, p.tpr)).collect();
    assert_eq!(pts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
    assert_eq!(c[0].threshold, f64::INFINITY);
    assert_eq!(c[1].threshold, 0.7);
}

fn day(d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 3, d).unwrap()
}

fn set(model: &str, task: Task, scores: &[(u32, f64, bool)]) -> PredictionSet {
    PredictionSet {
        task,
        model: model.into(),
        predictions: scores
            .iter()
            .map(|&(d, score, label)| Prediction {
                participant_id: "P0001".into(),
                target_day: day(d),
                score,
                label,
            })
            .collect(),
    }
}

#[test]
fn roc_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("roc.csv");
    let s = set("full", Task::FluSymptoms, &[(1, 0.2, false), (2, 0.4, true), (3, 0.4, false), (4, 0.9, true)]);
    export_roc_curve(&s, &path).unwrap();
    let (auc, curve) = read_roc_curve(&path).unwrap();
    assert_eq!(auc, s.auc().unwrap());
    assert_eq!(curve, s.curve().unwrap());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# auc=0.875\nthreshold,fpr,tpr\ninf,0,0\n"), "{text}");
}

#[test]
fn prediction_sets_are_checked() {
    let s = set("m", Task::Fatigue, &[(1, 1.5, true), (2, 0.1, false)]);
    assert!(matches!(s.validate(), Err(Error::Validation(_))));
    let s = set("m", Task::Fatigue, &[(1, 0.5, true), (1, 0.1, false)]);
    assert!(s.validate().is_err());
}

#[test]
fn comparison_grid_and_mismatch() {
    let examples = [(1, 0.1, false), (2, 0.8, true), (3, 0.3, false), (4, 0.6, true)];
    let full = set("full", Task::FluSymptoms, &examples);
    let worse: Vec<_> = examples.iter().map(|&(d, s, y)| (d, 1.0 - s, y)).collect();
    let base = set("gbdt_standard", Task::FluSymptoms, &worse);
    let fatigue = set("full", Task::Fatigue, &examples);
    let cmp = compare_runs(&[full.clone(), base.clone(), fatigue]).unwrap();
    assert_eq!(cmp.report.get(Task::FluSymptoms, "full").unwrap().roc_auc, 1.0);
    assert_eq!(cmp.report.get(Task::FluSymptoms, "gbdt_standard").unwrap().roc_auc, 0.0);
    assert_eq!(cmp.report.deltas.len(), 1);
    assert_eq!(cmp.report.deltas[0].absolute, -1.0);
    assert!(cmp.table.contains(Task::FluSymptoms.title()));
    assert!(cmp.table.contains(Task::Fatigue.title()));
    assert!(cmp.table.lines().any(|l| l.starts_with(Task::Fatigue.title()) && l.trim_end().ends_with('-')));

    let mut short = base.clone();
    short.predictions.pop();
    let err = compare_runs(&[full.clone(), short]).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
    let mut relabeled = base;
    relabeled.predictions[0].label = true;
    assert!(compare_runs(&[full.clone(), relabeled]).is_err());
    assert!(compare_runs(&[full.clone(), full]).is_err());
}

fn window(start: NaiveDate, target: NaiveDate, id: &str) -> Window {
    Window {
        participant_id: id.into(),
        target_day: target,
        first_day: start,
        label: Some(true),
        channels: Tensor::zeros(&[6, 4]),
    }
}

#[test]
fn guard_rejects_windows_crossing_the_boundary() {
    let mut guard = LeakageGuard::new(day(10));
    assert!(guard.check("a", day(10), day(14)).is_ok());
    assert!(matches!(guard.check("a", day(9), day(13)), Err(Error::Leakage(_))));
    assert!(guard.check("a", day(12), day(12)).is_err());
    guard.excluded_users.insert("b".into());
    let err = guard.check("b", day(11), day(15)).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Leakage);
    let ws = vec![window(day(10), day(14), "a"), window(day(8), day(12), "a")];
    assert!(matches!(
        evaluate_windows("m", Task::FluSymptoms, &ws, &LeakageGuard::new(day(10)), |_| Ok(0.5)),
        Err(Error::Leakage(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn planned_windows_stay_on_their_side(seed in 0u64..1000, boundary in 6usize..18, lookback in 1usize..5) {
        let ds = CohortGenerator::new(CohortConfig {
            n_participants: 6,
            n_days: 24,
            symptom_prevalence: 0.2,
            seed,
            ..Default::default()
        })
        .unwrap()
        .generate()
        .unwrap()
        .dataset;
        let spec = SplitSpec { boundary_day: ds.date_of(boundary), tuning_fraction: 0.0, seed };
        let Ok(plan) = plan_split(&ds, &spec, Task::Fatigue, lookback) else { return Ok(()) };
        let guard = LeakageGuard::new(ds.date_of(boundary));
        for k in &plan.train {
            let first = k.day - lookback;
            prop_assert!(first < k.day && k.day < boundary);
        }
        for k in &plan.test {
            let first = ds.date_of(k.day - lookback);
            prop_assert!(guard.check("x", first, ds.date_of(k.day)).is_ok());
        }
        for k in &plan.train {
            let first = ds.date_of(k.day - lookback);
            prop_assert!(guard.check("x", first, ds.date_of(k.day)).is_err());
        }
    }
}

#[test]
fn checkpoints_refuse_training_side_and_cohort_examples() {
    let ds = CohortGenerator::new(CohortConfig {
        n_participants: 30,
        n_days: 24,
        symptom_prevalence: 0.15,
        seed: 4,
        ..Default::default()
    })
    .unwrap()
    .generate()
    .unwrap()
    .dataset;
    let spec = WindowSpec {
        lookback_days: 4,
        resolution_minutes: 120,
    };
    let config = ModelConfig {
        conv_spec: vec![ConvSpec::new(3, 2, 4)],
        n_transformer_layers: 1,
        n_heads: 1,
        ffn_hidden: 8,
        input_length: spec.length(),
        ..Default::default()
    };
    let split = SplitSpec {
        boundary_day: ds.date_of(12),
        tuning_fraction: 0.2,
        seed: 2,
    };
    let plan = plan_split(&ds, &split, Task::FluSymptoms, 4).unwrap();
    let cfg = TrainConfig {
        max_epochs: 0,
        ..Default::default()
    };
    let (ckpt, _) = train_task(&ds, &plan, spec, &config, &cfg).unwrap();
    let scored = evaluate_checkpoint("full", &ckpt, &ds, &plan.test, spec).unwrap();
    assert_eq!(scored.predictions.len(), plan.test.len());
    let err = evaluate_checkpoint("full", &ckpt, &ds, &plan.train, spec).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Leakage);

    let (cohort, rest) = select_finetune_cohort(&plan.test_users, 4, 0).unwrap();
    let (ft, _) = finetune(&ckpt, &ds, &plan, &cohort, spec, &cfg).unwrap();
    let err = evaluate_checkpoint("ft", &ft, &ds, &plan.test, spec).unwrap_err();
    assert!(matches!(err, Error::Leakage(_)));
    let holdout = plan.test_examples_of(&rest);
    assert!(evaluate_checkpoint("ft", &ft, &ds, &holdout, spec).is_ok());

    let mut bare = ckpt;
    bare.provenance = None;
    assert!(evaluate_checkpoint("full", &bare, &ds, &plan.test, spec).is_err());
}
