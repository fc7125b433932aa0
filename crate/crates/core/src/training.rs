//! Focal-loss training with Adam, early stopping on tuning ROC AUC, and the
//! pretrain / finetune transfer pipeline.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{window_for_key, Dataset, ExampleKey, Normalization, SplitPlan, Task, Window, WindowSpec};
use crate::error::{Error, Result};
use crate::evaluation::roc_auc;
use crate::model::{
    dropout_rng, init_params, logit_graph, predict_logit, prepare_input, Checkpoint, ModelConfig, ModelParams,
    ParamVars, Provenance,
};
use crate::numerics::{focal_term, AdamConfig, AdamState, Tape, Tensor};

/// Mean focal loss `-α_t (1 - p_t)^γ ln p_t` over a batch, computed from
/// logits through the log-sigmoid.
pub fn focal_loss(logits: &[f64], labels: &[bool], gamma: f64, alpha: f64) -> f64 {
    assert_eq!(logits.len(), labels.len(), "focal_loss: length mismatch");
    if logits.is_empty() {
        return 0.0;
    }
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| focal_term(z, y as u8 as f64, gamma, alpha).0)
        .sum();
    total / logits.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without tuning-AUC improvement before stopping.
    pub early_stop_patience: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub seed: u64,
    pub task: Task,
    pub reinit_head_on_finetune: bool,
    /// Fit a per-channel affine input normalization on the training windows.
    pub normalize_inputs: bool,
    /// Print one line per epoch to standard output.
    pub log_progress: bool,
    /// Leave wall-clock fields empty so reports are reproducible.
    pub strict_deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 30,
            early_stop_patience: 5,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            seed: 0,
            task: Task::FluSymptoms,
            reinit_head_on_finetune: true,
            normalize_inputs: false,
            log_progress: false,
            strict_deterministic: false,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted so that a run can be replayed without
    /// moving the parameters.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config(format!("focal_gamma must be >= 0, got {}", self.focal_gamma)));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::Config(format!("focal_alpha must lie in (0, 1), got {}", self.focal_alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches, before each update.
    pub loss: f64,
    pub tuning_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: Task,
    pub n_train: usize,
    pub n_train_positive: usize,
    pub n_tuning: usize,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_tuning_auc: Option<f64>,
    pub stopped_early: bool,
    pub checkpoint: Option<String>,
    pub wall_clock_seconds: Option<f64>,
}

/// Labeled model inputs, materialized on demand.
pub trait Examples: Sync {
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> bool;
    fn channels(&self, i: usize) -> Tensor;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Examples for [Window] {
    fn len(&self) -> usize {
        <[Window]>::len(self)
    }

    fn label(&self, i: usize) -> bool {
        self[i].label.expect("training windows carry labels")
    }

    fn channels(&self, i: usize) -> Tensor {
        self[i].channels.clone()
    }
}

/// Windows of `keys`, built from `dataset` when requested.
pub struct KeyedExamples<'a> {
    pub dataset: &'a Dataset,
    pub keys: &'a [ExampleKey],
    pub spec: WindowSpec,
}

impl Examples for KeyedExamples<'_> {
    fn len(&self) -> usize {
        self.keys.len()
    }

    fn label(&self, i: usize) -> bool {
        self.keys[i].label
    }

    fn channels(&self, i: usize) -> Tensor {
        window_for_key(self.dataset, &self.keys[i], self.spec).channels
    }
}

fn check_labels(set: &[Window], name: &str) -> Result<()> {
    if let Some(w) = set.iter().find(|w| w.label.is_none()) {
        return Err(Error::Validation(format!(
            "{name} window for {} on {} has no label",
            w.participant_id, w.target_day
        )));
    }
    Ok(())
}

/// Logits of every example, in order.
pub fn predict_examples<E: Examples + ?Sized>(examples: &E, params: &ModelParams, config: &ModelConfig) -> Result<Vec<f64>> {
    (0..examples.len())
        .into_par_iter()
        .map(|i| predict_logit(&examples.channels(i), params, config))
        .collect()
}

fn tuning_auc<E: Examples + ?Sized>(tuning: &E, params: &ModelParams, config: &ModelConfig) -> Result<Option<f64>> {
    if tuning.is_empty() {
        return Ok(None);
    }
    let labels: Vec<bool> = (0..tuning.len()).map(|i| tuning.label(i)).collect();
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Ok(None);
    }
    let logits = predict_examples(tuning, params, config)?;
    roc_auc(&logits, &labels).map(Some)
}

/// Loss and parameter gradients of one example, the loss scaled by `weight`.
fn example_gradients(
    params: &ModelParams,
    config: &ModelConfig,
    channels: &Tensor,
    label: bool,
    cfg: &TrainConfig,
    weight: f64,
    mut rng: ChaCha8Rng,
) -> Result<(f64, Vec<Tensor>)> {
    let x = prepare_input(channels, params, config)?;
    let mut tape = Tape::new();
    let p = ParamVars::enter(&mut tape, params, true);
    let input = tape.constant(x);
    let dropout = (config.dropout_rate > 0.0).then_some(&mut rng);
    let logit = logit_graph(&mut tape, &p, config, input, dropout)?;
    let loss = tape.focal_loss(logit, &[label as u8 as f64], cfg.focal_gamma, cfg.focal_alpha)?;
    let loss = tape.scale(loss, weight);
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    // parameters outside the active graph (the CNN-only ablation) get zeros
    let g = p
        .vars()
        .iter()
        .zip(params.tensors.values())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, g))
}

/// Mini-batch Adam on the focal loss.
///
/// Gradients of a batch are computed per example, possibly in parallel, and
/// summed in example order, so results do not depend on the thread count.
/// Returns the parameters of the epoch with the best tuning AUC; without a
/// usable tuning set, the last epoch's parameters.
pub fn train<T, U>(
    params: ModelParams,
    config: &ModelConfig,
    train_set: &T,
    tuning_set: &U,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)>
where
    T: Examples + ?Sized,
    U: Examples + ?Sized,
{
    cfg.validate()?;
    config.validate()?;
    params.check_shapes(config)?;
    let started = Instant::now();
    let n = train_set.len();
    let positives = (0..n).filter(|&i| train_set.label(i)).count();
    if n == 0 {
        return Err(Error::SingleClass("training set is empty".into()));
    }
    if positives == 0 || positives == n {
        return Err(Error::SingleClass(format!("{n} training examples, {positives} positive")));
    }
    let mut report = TrainReport {
        task: cfg.task,
        n_train: n,
        n_train_positive: positives,
        n_tuning: tuning_set.len(),
        epochs: Vec::new(),
        best_epoch: None,
        best_tuning_auc: None,
        stopped_early: false,
        checkpoint: None,
        wall_clock_seconds: None,
    };
    if cfg.max_epochs == 0 {
        report.wall_clock_seconds = (!cfg.strict_deterministic).then(|| started.elapsed().as_secs_f64());
        return Ok((params, report));
    }

    let mut params = params;
    if cfg.normalize_inputs {
        params.normalization = Normalization::fit_channels((0..n).map(|i| train_set.channels(i)));
    }
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..Default::default()
        },
        params.tensors.values(),
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let weight = 1.0 / batch.len() as f64;
            let per_example: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| {
                    example_gradients(
                        &params,
                        config,
                        &train_set.channels(i),
                        train_set.label(i),
                        cfg,
                        weight,
                        dropout_rng(cfg.seed, epoch, i),
                    )
                })
                .collect::<Result<_>>()?;
            let mut iter = per_example.into_iter();
            let (mut loss, mut grads) = iter.next().unwrap();
            for (l, g) in iter {
                loss += l;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.add_assign(gi);
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            epoch_loss += loss * batch.len() as f64;
            let mut tensors: Vec<Tensor> = params.tensors.values().cloned().collect();
            adam.step(&name_refs, &mut tensors, &grads)?;
            for (slot, t) in params.tensors.values_mut().zip(tensors) {
                *slot = t;
            }
        }
        let auc = tuning_auc(tuning_set, &params, config)?;
        let loss = epoch_loss / n as f64;
        report.epochs.push(EpochRecord {
            epoch,
            loss,
            tuning_auc: auc,
        });
        if cfg.log_progress {
            let auc_text = auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
            println!("epoch {epoch:>3}  loss {loss:.6}  tuning_auc {auc_text}");
        }
        match auc {
            Some(a) if best.as_ref().is_none_or(|(b, _, _)| a > *b) => {
                best = Some((a, epoch, params.clone()));
                since_best = 0;
            }
            Some(_) => since_best += 1,
            None => {}
        }
        if best.is_some() && since_best >= cfg.early_stop_patience && epoch < cfg.max_epochs {
            report.stopped_early = true;
            break;
        }
    }
    let params = match best {
        Some((auc, epoch, p)) => {
            report.best_epoch = Some(epoch);
            report.best_tuning_auc = Some(auc);
            p
        }
        None => {
            report.best_epoch = report.epochs.last().map(|e| e.epoch);
            params
        }
    };
    report.wall_clock_seconds = (!cfg.strict_deterministic).then(|| started.elapsed().as_secs_f64());
    Ok((params, report))
}

/// [`train`] over materialized windows, which must all carry labels.
pub fn train_windows(
    params: ModelParams,
    config: &ModelConfig,
    train_set: &[Window],
    tuning_set: &[Window],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    check_labels(train_set, "training")?;
    check_labels(tuning_set, "tuning")?;
    train(params, config, train_set, tuning_set, cfg)
}

/// Checks that every example of `keys` belongs to the side of `plan` named
/// by `side`.
fn assert_within(plan: &SplitPlan, keys: &[ExampleKey], train_side: bool) -> Result<()> {
    for k in keys {
        let first = k.day.checked_sub(plan.lookback_days);
        let ok = match (train_side, first) {
            (true, Some(_)) => k.day < plan.boundary,
            (false, Some(f)) => f >= plan.boundary,
            (_, None) => false,
        };
        if !ok {
            return Err(Error::Leakage(format!(
                "example (participant {}, day {}) lies outside the {} period",
                k.participant,
                k.day,
                if train_side { "training" } else { "test" }
            )));
        }
    }
    Ok(())
}

/// Trains a fresh model on the train period of `plan`, with early stopping
/// on the tuning users' train-period examples. Those users are held out of
/// the gradient steps.
pub fn train_task(
    dataset: &Dataset,
    plan: &SplitPlan,
    spec: WindowSpec,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    if plan.task != cfg.task {
        return Err(Error::Config(format!("split is for {}, training asks for {}", plan.task, cfg.task)));
    }
    let train_keys = plan.train_examples_filtered(&plan.tuning_users, false);
    let tuning_keys = plan.train_examples_filtered(&plan.tuning_users, true);
    assert_within(plan, &train_keys, true)?;
    assert_within(plan, &tuning_keys, true)?;
    let params = init_params(model, cfg.seed)?;
    let train_set = KeyedExamples {
        dataset,
        keys: &train_keys,
        spec,
    };
    let tuning_set = KeyedExamples {
        dataset,
        keys: &tuning_keys,
        spec,
    };
    let (params, report) = train(params, model, &train_set, &tuning_set, cfg)?;
    Ok((
        Checkpoint {
            config: model.clone(),
            params,
            tag: format!("trained:{}", cfg.task),
            provenance: Some(Provenance {
                task: cfg.task,
                boundary_day: dataset.date_of(plan.boundary),
                test_period_users: Vec::new(),
            }),
        },
        report,
    ))
}

/// Trains on the fatigue task over the train period.
pub fn pretrain(
    dataset: &Dataset,
    plan: &SplitPlan,
    spec: WindowSpec,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    if plan.task != Task::Fatigue {
        return Err(Error::Config(format!("pretraining uses fatigue labels, split is for {}", plan.task)));
    }
    let cfg = TrainConfig {
        task: Task::Fatigue,
        ..cfg.clone()
    };
    let (mut ckpt, report) = train_task(dataset, plan, spec, model, &cfg)?;
    ckpt.tag = "pretrained:fatigue".into();
    Ok((ckpt, report))
}

/// Test-period examples of `cohort`, after checking that every member is a
/// test user of `plan`.
pub fn cohort_examples(dataset: &Dataset, plan: &SplitPlan, cohort: &[usize]) -> Result<Vec<ExampleKey>> {
    let cohort_set: BTreeSet<usize> = cohort.iter().copied().collect();
    let test_users: BTreeSet<usize> = plan.test_users.iter().copied().collect();
    if let Some(u) = cohort_set.iter().find(|u| !test_users.contains(u)) {
        return Err(Error::Leakage(format!(
            "cohort participant {} is not a test-period user outside the tuning subset",
            dataset.participants[*u].series.participant_id
        )));
    }
    let keys = plan.test_examples_of(cohort);
    assert_within(plan, &keys, false)?;
    if keys.iter().any(|k| !cohort_set.contains(&k.participant)) {
        return Err(Error::Leakage("cohort examples include non-cohort users".into()));
    }
    Ok(keys)
}

/// Provenance of a model trained on the test-period data of `cohort`.
pub fn cohort_provenance(dataset: &Dataset, plan: &SplitPlan, cohort: &[usize]) -> Provenance {
    let cohort_set: BTreeSet<usize> = cohort.iter().copied().collect();
    Provenance {
        task: plan.task,
        boundary_day: dataset.date_of(plan.boundary),
        test_period_users: cohort_set
            .iter()
            .map(|&u| dataset.participants[u].series.participant_id.clone())
            .collect(),
    }
}

#[allow(clippy::too_many_arguments)]
fn train_cohort(
    params: ModelParams,
    config: &ModelConfig,
    dataset: &Dataset,
    plan: &SplitPlan,
    cohort: &[usize],
    spec: WindowSpec,
    cfg: &TrainConfig,
    tag: &str,
) -> Result<(Checkpoint, TrainReport)> {
    if plan.task != cfg.task {
        return Err(Error::Config(format!("split is for {}, cohort training asks for {}", plan.task, cfg.task)));
    }
    let keys = cohort_examples(dataset, plan, cohort)?;
    let train_set = KeyedExamples {
        dataset,
        keys: &keys,
        spec,
    };
    let tuning_set = KeyedExamples {
        dataset,
        keys: &plan.tuning,
        spec,
    };
    let (params, report) = train(params, config, &train_set, &tuning_set, cfg)?;
    Ok((
        Checkpoint {
            config: config.clone(),
            params,
            tag: format!("{tag}:{}", cfg.task),
            provenance: Some(cohort_provenance(dataset, plan, cohort)),
        },
        report,
    ))
}

/// Full-network finetuning on the test-period examples of `cohort`.
///
/// The tuning users of `plan` drive early stopping. The returned checkpoint
/// records the cohort so that evaluation refuses to score it.
pub fn finetune(
    pretrained: &Checkpoint,
    dataset: &Dataset,
    plan: &SplitPlan,
    cohort: &[usize],
    spec: WindowSpec,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    pretrained.params.check_shapes(&pretrained.config)?;
    let mut params = pretrained.params.clone();
    if cfg.reinit_head_on_finetune && cfg.max_epochs > 0 {
        params.reinit_head(&pretrained.config, cfg.seed);
    }
    // keep the pretrained input normalization
    let cfg = TrainConfig {
        normalize_inputs: false,
        ..cfg.clone()
    };
    train_cohort(params, &pretrained.config, dataset, plan, cohort, spec, &cfg, "finetuned")
}

/// Trains a fresh model on the test-period examples of `cohort` only, the
/// reference point for finetuning.
pub fn train_on_cohort(
    dataset: &Dataset,
    plan: &SplitPlan,
    cohort: &[usize],
    spec: WindowSpec,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    let params = init_params(model, cfg.seed)?;
    train_cohort(params, model, dataset, plan, cohort, spec, cfg, "scratch")
}
