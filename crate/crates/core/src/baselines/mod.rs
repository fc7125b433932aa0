//! Baselines: boosted trees on handcrafted features and the CNN-only
//! ablation of the neural model.

mod gbdt;

pub use gbdt::{gbdt_predict, gbdt_train, gbdt_train_traced, logistic_loss, GbdtConfig, TreeEnsemble, TreeNode};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ExampleKey, SplitPlan, WindowSpec};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_checkpoint, evaluate_feature_windows, LeakageGuard, PredictionSet};
use crate::features::{feature_windows, FeatureSet, FeatureWindow};
use crate::model::{Architecture, Checkpoint, ModelConfig, Provenance};
use crate::training::{cohort_examples, cohort_provenance, train_task, TrainConfig, TrainReport};

pub const GBDT_STANDARD: &str = "gbdt_standard";
pub const GBDT_EXPERT: &str = "gbdt_expert";
pub const CNN_ONLY: &str = "cnn_only";

/// A trained tree model with its feature layout and training provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub config: GbdtConfig,
    pub lookback_days: usize,
    pub provenance: Provenance,
    pub ensemble: TreeEnsemble,
}

impl GbdtModel {
    pub fn score(&self, w: &FeatureWindow) -> Result<f64> {
        self.ensemble.predict(&w.vector(self.config.feature_set))
    }

    pub fn column_names(&self) -> Vec<String> {
        self.config.feature_set.column_names(self.lookback_days)
    }

    pub fn guard(&self) -> LeakageGuard {
        LeakageGuard {
            boundary_day: self.provenance.boundary_day,
            excluded_users: self.provenance.test_period_users.iter().cloned().collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let want = model.config.feature_set.per_day() * model.lookback_days;
        if model.ensemble.n_features != want {
            return Err(Error::Validation(format!(
                "{}: ensemble expects {} features, layout gives {want}",
                path.display(),
                model.ensemble.n_features
            )));
        }
        Ok(model)
    }
}

fn fit_on_keys(
    dataset: &Dataset,
    keys: &[ExampleKey],
    lookback_days: usize,
    config: &GbdtConfig,
    provenance: Provenance,
) -> Result<GbdtModel> {
    let windows = feature_windows(dataset, keys, lookback_days);
    let x: Vec<Vec<f64>> = windows.iter().map(|w| w.vector(config.feature_set)).collect();
    let y: Vec<bool> = windows.iter().map(FeatureWindow::label).collect();
    let ensemble = gbdt_train(&x, &y, config)?;
    Ok(GbdtModel {
        config: config.clone(),
        lookback_days,
        provenance,
        ensemble,
    })
}

/// Trains trees on the same train-period examples the neural model takes
/// gradient steps on: tuning users are left out.
pub fn train_gbdt_on_plan(dataset: &Dataset, plan: &SplitPlan, config: &GbdtConfig) -> Result<GbdtModel> {
    let keys = plan.train_examples_filtered(&plan.tuning_users, false);
    let provenance = Provenance {
        task: plan.task,
        boundary_day: dataset.date_of(plan.boundary),
        test_period_users: Vec::new(),
    };
    fit_on_keys(dataset, &keys, plan.lookback_days, config, provenance)
}

/// Trains trees on the test-period examples of a finetuning cohort.
pub fn train_gbdt_on_cohort(
    dataset: &Dataset,
    plan: &SplitPlan,
    cohort: &[usize],
    config: &GbdtConfig,
) -> Result<GbdtModel> {
    let keys = cohort_examples(dataset, plan, cohort)?;
    let provenance = cohort_provenance(dataset, plan, cohort);
    fit_on_keys(dataset, &keys, plan.lookback_days, config, provenance)
}

/// Scores `keys`, which must pass the model's leakage guard.
pub fn evaluate_gbdt(name: &str, model: &GbdtModel, dataset: &Dataset, keys: &[ExampleKey]) -> Result<PredictionSet> {
    let windows = feature_windows(dataset, keys, model.lookback_days);
    evaluate_feature_windows(name, model.provenance.task, &windows, &model.guard(), |w| model.score(w))
}

#[derive(Clone, Debug)]
pub struct BaselineSuite {
    pub gbdt_standard: GbdtModel,
    pub gbdt_expert: GbdtModel,
    pub cnn_only: Checkpoint,
    pub cnn_only_report: TrainReport,
    /// Test-period scores, ordered standard, expert, CNN-only.
    pub predictions: Vec<PredictionSet>,
}

/// Trains and scores the three baselines of one task.
///
/// The CNN-only model reuses `model`'s conv stack and head with the
/// transformer removed, trained with `train_cfg`.
pub fn run_baseline_suite(
    dataset: &Dataset,
    plan: &SplitPlan,
    spec: WindowSpec,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    gbdt: &GbdtConfig,
) -> Result<BaselineSuite> {
    let standard = train_gbdt_on_plan(
        dataset,
        plan,
        &GbdtConfig {
            feature_set: FeatureSet::Standard,
            ..gbdt.clone()
        },
    )?;
    let expert = train_gbdt_on_plan(
        dataset,
        plan,
        &GbdtConfig {
            feature_set: FeatureSet::Expert,
            ..gbdt.clone()
        },
    )?;
    let cnn_config = ModelConfig {
        architecture: Architecture::CnnOnly,
        n_transformer_layers: 0,
        ..model.clone()
    };
    let (cnn, report) = train_task(dataset, plan, spec, &cnn_config, train_cfg)?;
    let predictions = vec![
        evaluate_gbdt(GBDT_STANDARD, &standard, dataset, &plan.test)?,
        evaluate_gbdt(GBDT_EXPERT, &expert, dataset, &plan.test)?,
        evaluate_checkpoint(CNN_ONLY, &cnn, dataset, &plan.test, spec)?,
    ];
    Ok(BaselineSuite {
        gbdt_standard: standard,
        gbdt_expert: expert,
        cnn_only: cnn,
        cnn_only_report: report,
        predictions,
    })
}
