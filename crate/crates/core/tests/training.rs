mod common;

use chrono::NaiveDate;
use common::rng;
use proptest::prelude::*;
use rand::Rng;
use sensorformer::data::{plan_split, select_finetune_cohort};
use sensorformer::evaluation::roc_auc;
use sensorformer::model::{init_params, ConvSpec, ModelConfig, ModelParams};
use sensorformer::training::{
    finetune, focal_loss, predict_examples, pretrain, train_task, train_windows, TrainConfig,
};
use sensorformer::{CohortConfig, CohortGenerator, Dataset, Error, ErrorCategory, SplitSpec, Task, Tensor, Window, WindowSpec};

fn bce(z: f64, y: bool) -> f64 {
    // max(z, 0) - z y + ln(1 + e^{-|z|})
    z.max(0.0) - if y { z } else { 0.0 } + (-z.abs()).exp().ln_1p()
}

#[test]
fn focal_without_focusing_is_half_cross_entropy() {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let z = (r.random::<f64>() * 2.0 - 1.0) * 12.0;
        let y = r.random::<bool>();
        let fl = focal_loss(&[z], &[y], 0.0, 0.5);
        worst = worst.max((fl - 0.5 * bce(z, y)).abs());
    }
    assert!(worst <= 1e-12, "max deviation {worst:e}");
}

#[test]
fn focal_closed_form_point() {
    let fl = focal_loss(&[0.0], &[true], 2.0, 0.25);
    assert!((fl - 0.25 * 0.25 * std::f64::consts::LN_2).abs() <= 1e-9);
    assert!((fl - 0.043322).abs() < 1e-6);
    // negatives are weighted by 1 - alpha
    let neg = focal_loss(&[0.0], &[false], 2.0, 0.25);
    assert!((neg - 0.75 * 0.25 * std::f64::consts::LN_2).abs() <= 1e-12);
}

#[test]
fn focusing_down_weights_easy_examples() {
    // p_t = 0.9: the modulating factor is 0.1² = 0.01
    let z = (0.9f64 / 0.1).ln();
    let focal = focal_loss(&[z], &[true], 2.0, 0.5);
    let plain = focal_loss(&[z], &[true], 0.0, 0.5);
    assert!((focal / plain - 0.01).abs() < 1e-12);
    // a hard example keeps most of its weight
    let hard = focal_loss(&[-z], &[true], 2.0, 0.5) / focal_loss(&[-z], &[true], 0.0, 0.5);
    assert!((hard - 0.81).abs() < 1e-12);
}

#[test]
fn tape_and_batch_focal_losses_agree() {
    let logits = [-3.0, -0.2, 0.0, 1.5, 7.0];
    let labels = [true, false, true, false, true];
    let mut tape = sensorformer::Tape::new();
    let z = tape.param(Tensor::vector(logits.to_vec()).unwrap());
    let ys: Vec<f64> = labels.iter().map(|&y| y as u8 as f64).collect();
    let l = tape.focal_loss(z, &ys, 2.0, 0.25).unwrap();
    let a = tape.value(l).item();
    let b = focal_loss(&logits, &labels, 2.0, 0.25);
    assert!((a - b).abs() < 1e-15);
}

proptest! {
    #[test]
    fn focal_loss_falls_as_confidence_rises(z in -20.0f64..20.0, dz in 1e-3f64..5.0, gamma in 0.0f64..5.0, y: bool) {
        let toward = if y { z + dz } else { z - dz };
        let a = focal_loss(&[z], &[y], gamma, 0.25);
        let b = focal_loss(&[toward], &[y], gamma, 0.25);
        prop_assert!(b <= a);
        prop_assert!(b >= 0.0);
    }
}

fn toy_config(len: usize) -> ModelConfig {
    ModelConfig {
        conv_spec: vec![ConvSpec::new(4, 2, 8), ConvSpec::new(3, 2, 8), ConvSpec::new(1, 2, 8)],
        n_transformer_layers: 1,
        n_heads: 2,
        ffn_hidden: 16,
        dropout_rate: 0.1,
        input_length: len,
        ..ModelConfig::default()
    }
}

/// Windows whose step channel is shifted up on positives.
fn separable(n: usize, len: usize, seed: u64) -> Vec<Window> {
    let mut r = rng(seed);
    let day = NaiveDate::from_ymd_opt(2020, 2, 1).unwrap();
    (0..n)
        .map(|i| {
            let label = i % 2 == 0;
            let channels = Tensor::from_fn(&[6, len], |j| {
                let noise = r.random::<f64>();
                match j / len {
                    0 => noise + if label { 1.5 } else { 0.0 },
                    1 | 2 => noise,
                    _ => 0.0,
                }
            });
            Window {
                participant_id: format!("T{i:03}"),
                target_day: day,
                first_day: day - chrono::Days::new(4),
                label: Some(label),
                channels,
            }
        })
        .collect()
}

fn toy_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 16,
        max_epochs: 20,
        early_stop_patience: 20,
        seed: 5,
        strict_deterministic: true,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_toy_is_learned() {
    let config = toy_config(32);
    let train = separable(96, 32, 1);
    let tuning = separable(32, 32, 2);
    let holdout = separable(64, 32, 3);
    let params = init_params(&config, 1).unwrap();
    let (params, report) = train_windows(params, &config, &train, &tuning, &toy_train_config()).unwrap();
    assert!(report.epochs.len() <= 20);
    let logits = predict_examples(&holdout[..], &params, &config).unwrap();
    let labels: Vec<bool> = holdout.iter().map(|w| w.label.unwrap()).collect();
    let auc = roc_auc(&logits, &labels).unwrap();
    assert!(auc >= 0.99, "holdout AUC {auc}");
    assert!(report.best_tuning_auc.unwrap() >= 0.99);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let config = toy_config(32);
    let train = separable(40, 32, 4);
    let params = init_params(&config, 2).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        max_epochs: 3,
        ..toy_train_config()
    };
    let (out, report) = train_windows(params.clone(), &config, &train, &[], &cfg).unwrap();
    assert_eq!(report.epochs.len(), 3);
    assert_eq!(out, params);
}

fn bits(p: &ModelParams) -> Vec<u64> {
    p.tensors.values().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let config = toy_config(32);
    let train = separable(48, 32, 6);
    let tuning = separable(16, 32, 7);
    let cfg = TrainConfig {
        max_epochs: 3,
        ..toy_train_config()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            train_windows(init_params(&config, 3).unwrap(), &config, &train, &tuning, &cfg).unwrap()
        })
    };
    let (a, ra) = run(1);
    let (b, rb) = run(4);
    let (c, rc) = run(4);
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(bits(&b), bits(&c));
    assert_eq!(ra, rb);
    assert_eq!(serde_json::to_string(&rb).unwrap(), serde_json::to_string(&rc).unwrap());
    assert!(ra.wall_clock_seconds.is_none());
}

#[test]
fn a_small_step_lowers_the_full_batch_loss() {
    let config = ModelConfig {
        dropout_rate: 0.0,
        ..toy_config(32)
    };
    let train = separable(32, 32, 8);
    let labels: Vec<bool> = train.iter().map(|w| w.label.unwrap()).collect();
    let params = init_params(&config, 4).unwrap();
    let loss_of = |p: &ModelParams| {
        let logits = predict_examples(&train[..], p, &config).unwrap();
        focal_loss(&logits, &labels, 2.0, 0.25)
    };
    let before = loss_of(&params);
    let cfg = TrainConfig {
        learning_rate: 1e-6,
        batch_size: train.len(),
        max_epochs: 1,
        ..toy_train_config()
    };
    let (after, report) = train_windows(params, &config, &train, &[], &cfg).unwrap();
    assert!((report.epochs[0].loss - before).abs() < 1e-12);
    assert!(loss_of(&after) < before);
}

#[test]
fn single_class_and_bad_configs_are_rejected() {
    let config = toy_config(32);
    let mut train = separable(8, 32, 9);
    for w in &mut train {
        w.label = Some(true);
    }
    let p = init_params(&config, 0).unwrap();
    assert!(matches!(
        train_windows(p.clone(), &config, &train, &[], &toy_train_config()),
        Err(Error::SingleClass(_))
    ));
    train[0].label = None;
    assert!(train_windows(p.clone(), &config, &train, &[], &toy_train_config()).is_err());
    let bad = TrainConfig {
        learning_rate: -1.0,
        ..toy_train_config()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = TrainConfig {
        batch_size: 0,
        ..toy_train_config()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn non_finite_inputs_stop_training_with_a_numeric_error() {
    let config = toy_config(32);
    let mut train = separable(8, 32, 10);
    train[3].channels.data_mut()[5] = f64::NAN;
    let err = train_windows(init_params(&config, 0).unwrap(), &config, &train, &[], &toy_train_config()).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Numeric, "{err}");
}

fn small_cohort() -> Dataset {
    CohortGenerator::new(CohortConfig {
        n_participants: 40,
        n_days: 24,
        symptom_prevalence: 0.15,
        seed: 21,
        ..Default::default()
    })
    .unwrap()
    .generate()
    .unwrap()
    .dataset
}

const SPEC: WindowSpec = WindowSpec {
    lookback_days: 4,
    resolution_minutes: 60,
};

fn split(ds: &Dataset) -> SplitSpec {
    SplitSpec {
        boundary_day: ds.date_of(12),
        tuning_fraction: 0.2,
        seed: 1,
    }
}

#[test]
fn pretrain_then_finetune_respects_the_split() {
    let ds = small_cohort();
    let config = toy_config(SPEC.length());
    let fatigue = plan_split(&ds, &split(&ds), Task::Fatigue, 4).unwrap();
    let zero = TrainConfig {
        max_epochs: 0,
        task: Task::Fatigue,
        ..toy_train_config()
    };
    let (pre, report) = pretrain(&ds, &fatigue, SPEC, &config, &zero).unwrap();
    assert_eq!(pre.tag, "pretrained:fatigue");
    assert!(report.epochs.is_empty());
    assert_eq!(pre.params, init_params(&config, zero.seed).unwrap());
    let flu = plan_split(&ds, &split(&ds), Task::FluSymptoms, 4).unwrap();
    assert!(pretrain(&ds, &flu, SPEC, &config, &zero).is_err());

    let (cohort, _) = select_finetune_cohort(&flu.test_users, 6, 3).unwrap();
    let ft_zero = TrainConfig {
        max_epochs: 0,
        task: Task::FluSymptoms,
        ..toy_train_config()
    };
    let (ft, _) = finetune(&pre, &ds, &flu, &cohort, SPEC, &ft_zero).unwrap();
    assert_eq!(ft.params, pre.params, "zero epochs keep the head");
    let prov = ft.provenance.as_ref().unwrap();
    assert_eq!(prov.test_period_users.len(), 6);
    assert_eq!(prov.boundary_day, ds.date_of(12));
    for u in &cohort {
        assert!(prov.test_period_users.contains(&ds.participants[*u].series.participant_id));
    }

    let ft_cfg = TrainConfig {
        max_epochs: 2,
        ..ft_zero.clone()
    };
    let (ft, report) = finetune(&pre, &ds, &flu, &cohort, SPEC, &ft_cfg).unwrap();
    assert!(!report.epochs.is_empty());
    assert!(ft.params.all_finite());
    assert_ne!(ft.params.get("head.weight").unwrap(), pre.params.get("head.weight").unwrap());
    assert_eq!(ft.params.normalization, pre.params.normalization);
}

#[test]
fn finetuning_on_tuning_users_is_leakage() {
    let ds = small_cohort();
    let config = toy_config(SPEC.length());
    let flu = plan_split(&ds, &split(&ds), Task::FluSymptoms, 4).unwrap();
    let zero = TrainConfig {
        max_epochs: 0,
        ..toy_train_config()
    };
    let (ckpt, _) = train_task(&ds, &flu, SPEC, &config, &zero).unwrap();
    let cohort = vec![flu.tuning_users[0], flu.test_users[0]];
    let err = finetune(&ckpt, &ds, &flu, &cohort, SPEC, &zero).unwrap_err();
    assert!(matches!(err, Error::Leakage(_)));
    assert_eq!(err.category(), ErrorCategory::Leakage);
    let wrong_task = TrainConfig {
        task: Task::Fatigue,
        ..zero
    };
    assert!(train_task(&ds, &flu, SPEC, &config, &wrong_task).is_err());
}

#[test]
fn trained_task_reports_the_gradient_examples() {
    let ds = small_cohort();
    let config = toy_config(SPEC.length());
    let flu = plan_split(&ds, &split(&ds), Task::FluSymptoms, 4).unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        normalize_inputs: true,
        ..toy_train_config()
    };
    let (ckpt, report) = train_task(&ds, &flu, SPEC, &config, &cfg).unwrap();
    let tuning: std::collections::BTreeSet<usize> = flu.tuning_users.iter().copied().collect();
    let expected = flu.train.iter().filter(|k| !tuning.contains(&k.participant)).count();
    assert_eq!(report.n_train, expected);
    assert_eq!(report.n_tuning, flu.train.len() - expected);
    assert!(!ckpt.params.normalization.is_identity());
    assert!(ckpt.provenance.unwrap().test_period_users.is_empty());
}
