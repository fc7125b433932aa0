mod common;


use common::{all_stumps, random_dataset, rng, stump_config, OracleSplit};
use proptest::prelude::*;
use rand::Rng;
use sensorformer::baselines::{
    gbdt_predict, gbdt_train, gbdt_train_traced, run_baseline_suite, GbdtConfig, TreeEnsemble, TreeNode, CNN_ONLY,
    GBDT_EXPERT, GBDT_STANDARD,
};
use sensorformer::data::plan_split;
use sensorformer::evaluation::{compare_runs, roc_auc};
use sensorformer::features::FeatureSet;
use sensorformer::model::{ConvSpec, ModelConfig};
use sensorformer::training::TrainConfig;
use sensorformer::{CohortConfig, CohortGenerator, Error, SplitSpec, Task, WindowSpec};

#[test]
fn single_stump_is_the_brute_force_optimum() {
    let mut r = rng(7);
    for case in 0..100 {
        let (x, y) = random_dataset(&mut r);
        let min_leaf = r.random_range(1..=5);
        let model = gbdt_train(&x, &y, &stump_config(min_leaf)).unwrap();
        assert_eq!(model.trees.len(), 1);
        let stumps = all_stumps(&x, &y, min_leaf);
        let best = stumps.iter().map(|s| s.gain).fold(f64::NEG_INFINITY, f64::max);
        let tol = 1e-9 * (1.0 + best.abs());
        match &model.trees[0] {
            TreeNode::Leaf { .. } => assert!(stumps.is_empty() || best <= tol, "case {case}: missed gain {best}"),
            TreeNode::Split {
                feature,
                threshold,
                gain,
                left,
                right,
            } => {
                assert!((gain - best).abs() <= tol, "case {case}: gain {gain} vs {best}");
                // the first optimum in (feature, threshold) order, up to rounding
                let chosen = stumps.iter().find(|s| s.gain >= best - tol).unwrap();
                let near: Vec<&OracleSplit> = stumps.iter().filter(|s| s.gain >= best - tol).collect();
                if near.len() == 1 {
                    assert_eq!((*feature, *threshold), (chosen.feature, chosen.threshold), "case {case}");
                }
                let mine = near
                    .iter()
                    .find(|s| s.feature == *feature && s.threshold == *threshold)
                    .unwrap_or_else(|| panic!("case {case}: split ({feature}, {threshold}) is not optimal"));
                let (TreeNode::Leaf { value: l }, TreeNode::Leaf { value: rv }) = (&**left, &**right) else {
                    panic!("stump children must be leaves");
                };
                assert!((l - mine.left).abs() <= 1e-9 * (1.0 + mine.left.abs()));
                assert!((rv - mine.right).abs() <= 1e-9 * (1.0 + mine.right.abs()));
            }
        }
    }
}

#[test]
fn ties_go_to_the_lowest_feature_then_threshold() {
    // features 0 and 1 are identical; labels split cleanly at 1.0 or 2.0
    let x: Vec<Vec<f64>> = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0].iter().map(|&v| vec![v, v]).collect();
    let y = [false, false, true, true, true, true];
    let m = gbdt_train(&x, &y, &stump_config(1)).unwrap();
    let TreeNode::Split { feature, threshold, .. } = m.trees[0] else { panic!() };
    assert_eq!((feature, threshold), (0, 1.0));
}

#[test]
fn separable_line_is_cut_at_the_true_threshold() {
    let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
    let y: Vec<bool> = (0..40).map(|i| i >= 17).collect();
    let m = gbdt_train(&x, &y, &stump_config(1)).unwrap();
    let TreeNode::Split { threshold, .. } = m.trees[0] else { panic!() };
    assert_eq!(threshold, 16.0);
    // unseen points on either side of the gap between 16 and 17
    let holdout: Vec<f64> = (0..40)
        .map(|i| gbdt_predict(&m, &[i as f64 + if i >= 17 { 0.3 } else { -0.3 }]).unwrap())
        .collect();
    let labels: Vec<bool> = (0..40).map(|i| i >= 17).collect();
    assert_eq!(roc_auc(&holdout, &labels).unwrap(), 1.0);
    assert!(holdout[17..].iter().all(|&s| s > holdout[0]));
}

#[test]
fn training_loss_never_rises() {
    let mut r = rng(11);
    let x: Vec<Vec<f64>> = (0..200).map(|_| (0..6).map(|_| r.random::<f64>()).collect()).collect();
    let y: Vec<bool> = x
        .iter()
        .map(|row| r.random_bool(if row[0] + row[1] * row[2] > 0.8 { 0.8 } else { 0.2 }))
        .collect();
    let (_, trace) = gbdt_train_traced(&x, &y, &GbdtConfig::default()).unwrap();
    assert_eq!(trace.len(), 201);
    for (i, w) in trace.windows(2).enumerate() {
        assert!(w[1] <= w[0], "round {}: {} -> {}", i + 1, w[0], w[1]);
    }
    assert!(trace[200] < trace[0]);
}

#[test]
fn prior_only_and_input_checks() {
    let m = TreeEnsemble::prior(3, 0.5, 0.1);
    assert_eq!(gbdt_predict(&m, &[1.0, 2.0, 3.0]).unwrap(), 0.5);
    let m = TreeEnsemble::prior(3, 0.2, 0.1);
    assert!((gbdt_predict(&m, &[0.0; 3]).unwrap() - 0.2).abs() < 1e-15);
    assert!(matches!(gbdt_predict(&m, &[0.0; 2]), Err(Error::Shape { .. })));

    let bad = GbdtConfig {
        n_rounds: 0,
        ..Default::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let x = vec![vec![0.0], vec![1.0], vec![2.0]];
    assert!(matches!(gbdt_train(&x, &[true; 3], &GbdtConfig::default()), Err(Error::SingleClass(_))));
    assert!(gbdt_train(&x[..1], &[true], &GbdtConfig::default()).is_err());
    assert!(gbdt_train(&x, &[true, false], &GbdtConfig::default()).is_err());
}

fn noisy_problem(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut r = rng(seed);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| vec![7.0, r.random::<f64>(), r.random::<f64>(), r.random_range(0..4) as f64])
        .collect();
    let y = x.iter().map(|row| r.random_bool(if row[1] > 0.6 { 0.7 } else { 0.15 })).collect();
    (x, y)
}

#[test]
fn tree_structure_invariants() {
    let (x, y) = noisy_problem(3, 300);
    let cfg = GbdtConfig {
        n_rounds: 30,
        max_depth: 3,
        min_samples_leaf: 4,
        ..Default::default()
    };
    let m = gbdt_train(&x, &y, &cfg).unwrap();
    fn walk(node: &TreeNode, x: &[Vec<f64>], members: &[usize], min_leaf: usize) {
        match node {
            TreeNode::Leaf { .. } => assert!(members.len() >= min_leaf),
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                assert_ne!(*feature, 0, "constant feature was split");
                assert!(x.iter().any(|r| r[*feature] == *threshold), "unobserved threshold");
                let (l, r): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&i| x[i][*feature] <= *threshold);
                walk(left, x, &l, min_leaf);
                walk(right, x, &r, min_leaf);
            }
        }
    }
    let all: Vec<usize> = (0..x.len()).collect();
    for t in &m.trees {
        assert!(t.depth() <= 3);
        assert!(t.n_leaves() <= 8);
        walk(t, &x, &all, 4);
    }
    let imp = m.feature_importance();
    assert_eq!(imp[0], 0.0);
    assert!(imp[1] > imp[2]);
}

#[test]
fn adding_to_leaves_raises_every_score() {
    let (x, y) = noisy_problem(4, 120);
    let m = gbdt_train(&x, &y, &GbdtConfig { n_rounds: 10, ..Default::default() }).unwrap();
    let mut shifted = m.clone();
    shifted.trees[3].shift_leaves(0.25);
    for row in &x {
        assert!(gbdt_predict(&shifted, row).unwrap() > gbdt_predict(&m, row).unwrap());
    }
}

#[test]
fn predictions_ignore_training_order_and_threads() {
    let (x, y) = noisy_problem(5, 150);
    let cfg = GbdtConfig {
        n_rounds: 25,
        ..Default::default()
    };
    let m = gbdt_train(&x, &y, &cfg).unwrap();
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.reverse();
    order.swap(3, 77);
    let xp: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();
    let yp: Vec<bool> = order.iter().map(|&i| y[i]).collect();
    let mp = gbdt_train(&xp, &yp, &cfg).unwrap();
    for row in &x {
        let (a, b) = (gbdt_predict(&m, row).unwrap(), gbdt_predict(&mp, row).unwrap());
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let m1 = single.install(|| gbdt_train(&x, &y, &cfg).unwrap());
    assert_eq!(m1, m);
}

#[test]
fn ensemble_serialization_and_importance_export() {
    let (x, y) = noisy_problem(6, 100);
    let m = gbdt_train(&x, &y, &GbdtConfig { n_rounds: 5, ..Default::default() }).unwrap();
    let json = m.to_json().unwrap();
    assert!(json.contains("\"kind\": \"split\""));
    assert_eq!(TreeEnsemble::from_json(&json).unwrap(), m);
    let names: Vec<String> = ["const", "signal", "noise", "level"].iter().map(|s| s.to_string()).collect();
    let mut buf = Vec::new();
    m.write_importance_csv(&names, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "feature,name,gain");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,const,0"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scores_stay_in_the_unit_interval(seed in 0u64..1000, depth in 1usize..5) {
        let (x, y) = noisy_problem(seed, 60);
        prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
        let m = gbdt_train(&x, &y, &GbdtConfig { n_rounds: 8, max_depth: depth, min_samples_leaf: 1, ..Default::default() }).unwrap();
        for row in &x {
            let s = gbdt_predict(&m, row).unwrap();
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}

#[test]
fn baseline_suite_scores_the_main_model_examples() {
    let ds = CohortGenerator::new(CohortConfig {
        n_participants: 40,
        n_days: 28,
        symptom_prevalence: 0.15,
        seed: 31,
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
    let split = SplitSpec {
        boundary_day: ds.date_of(14),
        tuning_fraction: 0.2,
        seed: 3,
    };
    let plan = plan_split(&ds, &split, Task::FluSymptoms, 4).unwrap();
    let model = ModelConfig {
        conv_spec: vec![ConvSpec::new(3, 2, 4)],
        n_transformer_layers: 1,
        n_heads: 1,
        ffn_hidden: 8,
        input_length: spec.length(),
        ..Default::default()
    };
    let train = TrainConfig {
        max_epochs: 1,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let gbdt = GbdtConfig {
        n_rounds: 10,
        ..Default::default()
    };
    let suite = run_baseline_suite(&ds, &plan, spec, &model, &train, &gbdt).unwrap();
    let names: Vec<&str> = suite.predictions.iter().map(|p| p.model.as_str()).collect();
    assert_eq!(names, vec![GBDT_STANDARD, GBDT_EXPERT, CNN_ONLY]);
    for set in &suite.predictions {
        assert_eq!(set.predictions.len(), plan.test.len());
    }
    assert_eq!(suite.gbdt_standard.ensemble.n_features, 68);
    assert_eq!(suite.gbdt_expert.ensemble.n_features, 92);
    assert_eq!(suite.gbdt_expert.config.feature_set, FeatureSet::Expert);
    assert!(!suite.cnn_only.params.tensors.keys().any(|k| k.starts_with("layer")));
    compare_runs(&suite.predictions).unwrap();
}
