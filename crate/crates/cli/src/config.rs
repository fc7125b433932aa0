//! Experiment configuration: a TOML file whose values command-line flags
//! override.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sensorformer::baselines::GbdtConfig;
use sensorformer::model::ModelConfig;
use sensorformer::training::TrainConfig;
use sensorformer::{CohortConfig, Dataset, Error, SplitSpec, Task, WindowSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// First test-period day; the study midpoint when absent.
    pub boundary_day: Option<NaiveDate>,
    pub tuning_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            boundary_day: None,
            tuning_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn resolve(&self, dataset: &Dataset) -> SplitSpec {
        let mut spec = SplitSpec::midpoint(dataset, self.seed);
        if let Some(d) = self.boundary_day {
            spec.boundary_day = d;
        }
        spec.tuning_fraction = self.tuning_fraction;
        spec
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub lookback_days: usize,
    pub resolution_minutes: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        let w = WindowSpec::default();
        Self {
            lookback_days: w.lookback_days,
            resolution_minutes: w.resolution_minutes,
        }
    }
}

impl WindowConfig {
    pub fn spec(&self) -> WindowSpec {
        WindowSpec {
            lookback_days: self.lookback_days,
            resolution_minutes: self.resolution_minutes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub k: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { k: 12, seed: 0 }
    }
}

/// Which baselines `train --model-kind all` fits next to the full model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineToggles {
    pub gbdt_standard: bool,
    pub gbdt_expert: bool,
    pub cnn_only: bool,
}

impl Default for BaselineToggles {
    fn default() -> Self {
        Self {
            gbdt_standard: true,
            gbdt_expert: true,
            cnn_only: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory holding `sensors.*` and `labels.*`.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub task: Option<Task>,
    pub cohort: CohortConfig,
    pub split: SplitConfig,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gbdt: GbdtConfig,
    pub finetune: FinetuneConfig,
    pub baselines: BaselineToggles,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
    }

    /// Model input length follows the window; the channel count is fixed.
    pub fn resolved_model(&self) -> ModelConfig {
        ModelConfig {
            input_length: self.window.spec().length(),
            ..self.model.clone()
        }
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset given (use --data or `data` in the config)".into()).into())
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory given (use --out or `out` in the config)".into()).into())
    }
}
