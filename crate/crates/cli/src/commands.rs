//! Subcommand implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sensorformer::baselines::{
    evaluate_gbdt, train_gbdt_on_cohort, train_gbdt_on_plan, GbdtModel, CNN_ONLY, GBDT_EXPERT, GBDT_STANDARD,
};
use sensorformer::data::{load_dataset, plan_split, select_finetune_cohort, write_dataset, FileFormat};
use sensorformer::evaluation::{compare_runs, evaluate_checkpoint, export_roc_curve, MetricsEntry, PredictionSet};
use sensorformer::features::{build_feature_windows, write_day_features_csv, write_feature_windows_csv, FeatureSet};
use sensorformer::model::{load_checkpoint, save_checkpoint, Architecture, Checkpoint, ModelConfig};
use sensorformer::training::{finetune, pretrain, train_on_cohort, train_task, TrainReport};
use sensorformer::{generate_cohort, Dataset, Error, ExampleKey, SplitPlan, Task};

use crate::config::ExperimentConfig;
use crate::{
    Cli, Command, DataArgs, EvaluateArgs, FeaturizeArgs, FinetuneArgs, Format, ModelKind, Period, ReportArgs,
    SynthArgs, TrainArgs, TrainFlags,
};

pub fn run(cli: Cli) -> Result<()> {
    // strict runs default to one worker; reductions are ordered either way
    let threads = cli.threads.or(cli.strict_deterministic.then_some(1));
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    if cli.strict_deterministic {
        cfg.train.strict_deterministic = true;
    }
    let run = Run {
        argv: std::env::args().skip(1).collect(),
        strict: cfg.train.strict_deterministic,
    };
    match cli.command {
        Command::Synth(a) => synth(&run, cfg, a),
        Command::Featurize(a) => featurize(&run, cfg, a),
        Command::Train(a) => train(&run, cfg, a, false),
        Command::Pretrain(a) => train(&run, cfg, a, true),
        Command::Finetune(a) => finetune_cmd(&run, cfg, a),
        Command::Evaluate(a) => evaluate(&run, cfg, a),
        Command::Report(a) => report(&run, a),
    }
}

struct Run {
    argv: Vec<String>,
    strict: bool,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: &'a [String],
    version: &'a str,
    threads: usize,
    strict_deterministic: bool,
    seeds: BTreeMap<&'a str, u64>,
    config: &'a ExperimentConfig,
}

impl Run {
    fn manifest(&self, command: &str, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
        let seeds = BTreeMap::from([
            ("cohort", cfg.cohort.seed),
            ("split", cfg.split.seed),
            ("train", cfg.train.seed),
            ("gbdt", cfg.gbdt.seed),
            ("finetune_cohort", cfg.finetune.seed),
        ]);
        let m = Manifest {
            command,
            argv: &self.argv,
            version: env!("CARGO_PKG_VERSION"),
            threads: rayon::current_num_threads(),
            strict_deterministic: self.strict,
            seeds,
            config: cfg,
        };
        write_json(&out.join("manifest.json"), &m)
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn apply_data_args(cfg: &mut ExperimentConfig, a: &DataArgs) {
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    if let Some(t) = a.task {
        cfg.task = Some(t);
    }
    if let Some(b) = a.boundary_day {
        cfg.split.boundary_day = Some(b);
    }
    if let Some(f) = a.tuning_fraction {
        cfg.split.tuning_fraction = f;
    }
    if let Some(s) = a.split_seed {
        cfg.split.seed = s;
    }
    if let Some(l) = a.lookback_days {
        cfg.window.lookback_days = l;
    }
    if let Some(r) = a.resolution {
        cfg.window.resolution_minutes = r;
    }
}

fn apply_train_flags(cfg: &mut ExperimentConfig, t: &TrainFlags) {
    let tc = &mut cfg.train;
    if let Some(e) = t.epochs {
        tc.max_epochs = e;
    }
    if let Some(lr) = t.lr {
        tc.learning_rate = lr;
    }
    if let Some(b) = t.batch_size {
        tc.batch_size = b;
    }
    if let Some(p) = t.patience {
        tc.early_stop_patience = p;
    }
    if let Some(s) = t.seed {
        tc.seed = s;
        cfg.gbdt.seed = s;
    }
    if t.normalize {
        tc.normalize_inputs = true;
    }
    tc.log_progress = !t.quiet;
}

/// Locates `sensors.*` and `labels.*` in a dataset directory.
fn load_dir(dir: &Path) -> Result<Dataset> {
    let find = |stem: &str| -> Result<PathBuf> {
        for ext in ["csv", "jsonl"] {
            let p = dir.join(format!("{stem}.{ext}"));
            if p.is_file() {
                return Ok(p);
            }
        }
        Err(Error::Config(format!("{} has no {stem}.csv or {stem}.jsonl", dir.display())).into())
    };
    let (sensors, labels) = (find("sensors")?, find("labels")?);
    Ok(load_dataset(&sensors, &labels)?)
}

fn resolve_task(cfg: &ExperimentConfig) -> Task {
    cfg.task.unwrap_or(cfg.train.task)
}

fn plan(cfg: &ExperimentConfig, dataset: &Dataset, task: Task) -> Result<SplitPlan> {
    let spec = cfg.window.spec();
    spec.validate()?;
    Ok(plan_split(dataset, &cfg.split.resolve(dataset), task, spec.lookback_days)?)
}

fn print_counts(dataset: &Dataset) {
    println!(
        "participants {}  days {}  user-days {}  present user-days {}",
        dataset.participants.len(),
        dataset.n_days,
        dataset.user_days(),
        dataset.present_user_days()
    );
    for task in Task::ALL {
        let (labeled, positive) = dataset.label_counts(task);
        let prevalence = if labeled == 0 { 0.0 } else { positive as f64 / labeled as f64 };
        println!("{:<14} labeled {labeled:>7}  positive {positive:>6}  prevalence {prevalence:.4}", task.as_str());
    }
}

fn synth(run: &Run, mut cfg: ExperimentConfig, a: SynthArgs) -> Result<()> {
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    if let Some(n) = a.participants {
        cfg.cohort.n_participants = n;
    }
    if let Some(d) = a.days {
        cfg.cohort.n_days = d;
    }
    if let Some(s) = a.seed {
        cfg.cohort.seed = s;
    }
    if a.long_range {
        cfg.cohort.long_range_mode = true;
    }
    let out = cfg.out_dir()?.to_path_buf();
    let generated = generate_cohort(&cfg.cohort)?;
    ensure_dir(&out)?;
    let format = match a.format {
        Format::Csv => FileFormat::Csv,
        Format::Jsonl => FileFormat::Jsonl,
    };
    let (sensors, labels) = write_dataset(&generated.dataset, &out, format)?;
    write_json(&out.join("ground_truth.json"), &generated.truth)?;
    run.manifest("synth", &cfg, &out)?;
    println!("wrote {} and {}", sensors.display(), labels.display());
    print_counts(&generated.dataset);
    Ok(())
}

fn featurize(run: &Run, mut cfg: ExperimentConfig, a: FeaturizeArgs) -> Result<()> {
    apply_data_args(&mut cfg, &a.data);
    let dataset = load_dir(cfg.data_dir()?)?;
    let out = cfg.out_dir()?.to_path_buf();
    let task = resolve_task(&cfg);
    let plan = plan(&cfg, &dataset, task)?;
    ensure_dir(&out)?;
    let file = File::create(out.join("day_features.csv"))?;
    write_day_features_csv(&dataset, BufWriter::new(file))?;
    let split = build_feature_windows(&dataset, &plan);
    for (name, windows) in [("train", &split.train), ("tuning", &split.tuning), ("test", &split.test)] {
        let path = out.join(format!("windows_{name}.csv"));
        write_feature_windows_csv(windows, FeatureSet::Expert, plan.lookback_days, &path)?;
        println!("{name:<7} {:>7} windows -> {}", windows.len(), path.display());
    }
    run.manifest("featurize", &cfg, &out)
}

fn architecture_name(config: &ModelConfig) -> &'static str {
    match config.architecture {
        Architecture::Full => "full",
        Architecture::CnnOnly => CNN_ONLY,
    }
}

fn gbdt_name(set: FeatureSet) -> &'static str {
    match set {
        FeatureSet::Standard => GBDT_STANDARD,
        FeatureSet::Expert => GBDT_EXPERT,
    }
}

fn neural_config(cfg: &ExperimentConfig, kind: ModelKind) -> ModelConfig {
    let base = cfg.resolved_model();
    match kind {
        ModelKind::CnnOnly => ModelConfig {
            architecture: Architecture::CnnOnly,
            n_transformer_layers: 0,
            ..base
        },
        _ => base,
    }
}

fn save_neural(dir: &Path, ckpt: &Checkpoint, mut report: TrainReport) -> Result<()> {
    ensure_dir(dir)?;
    let path = dir.join("model.ckpt");
    save_checkpoint(&path, ckpt)?;
    report.checkpoint = Some("model.ckpt".into());
    write_json(&dir.join("train_report.json"), &report)?;
    println!("saved {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct GbdtReport {
    task: Task,
    model: String,
    n_train: usize,
    n_trees: usize,
    n_features: usize,
    checkpoint: String,
}

fn save_gbdt(dir: &Path, model: &GbdtModel, n_train: usize) -> Result<()> {
    ensure_dir(dir)?;
    let path = dir.join("model.json");
    model.save(&path)?;
    let file = File::create(dir.join("feature_importance.csv"))?;
    model.ensemble.write_importance_csv(&model.column_names(), BufWriter::new(file))?;
    let report = GbdtReport {
        task: model.provenance.task,
        model: gbdt_name(model.config.feature_set).into(),
        n_train,
        n_trees: model.ensemble.trees.len(),
        n_features: model.ensemble.n_features,
        checkpoint: "model.json".into(),
    };
    write_json(&dir.join("train_report.json"), &report)?;
    println!("saved {}", path.display());
    Ok(())
}

fn gbdt_config(cfg: &ExperimentConfig, set: FeatureSet) -> sensorformer::baselines::GbdtConfig {
    sensorformer::baselines::GbdtConfig {
        feature_set: set,
        ..cfg.gbdt.clone()
    }
}

fn train(run: &Run, mut cfg: ExperimentConfig, a: TrainArgs, pretraining: bool) -> Result<()> {
    apply_data_args(&mut cfg, &a.data);
    apply_train_flags(&mut cfg, &a.train);
    // the config's task names the downstream target; only the flag can contradict pretraining
    let task = if pretraining {
        match a.data.task {
            Some(t) if t != Task::Fatigue => {
                return Err(Error::Config(format!("pretraining uses fatigue labels, not {t}")).into())
            }
            _ => Task::Fatigue,
        }
    } else {
        resolve_task(&cfg)
    };
    cfg.task = Some(task);
    cfg.train.task = task;
    let dataset = load_dir(cfg.data_dir()?)?;
    let out = cfg.out_dir()?.to_path_buf();
    if dataset.label_counts(task).0 == 0 {
        return Err(Error::Validation(format!("dataset has no {} labels", task.as_str())).into());
    }
    let plan = plan(&cfg, &dataset, task)?;
    let spec = cfg.window.spec();
    let n_gbdt_train = plan.train.len() - plan.train_examples_filtered(&plan.tuning_users, true).len();

    let kinds: Vec<ModelKind> = match a.model_kind {
        ModelKind::All if pretraining => {
            return Err(Error::Config("pretrain supports --model-kind full or cnn-only".into()).into())
        }
        ModelKind::All => {
            let mut kinds = vec![ModelKind::Full];
            if cfg.baselines.cnn_only {
                kinds.push(ModelKind::CnnOnly);
            }
            if cfg.baselines.gbdt_standard {
                kinds.push(ModelKind::GbdtStandard);
            }
            if cfg.baselines.gbdt_expert {
                kinds.push(ModelKind::GbdtExpert);
            }
            kinds
        }
        k @ (ModelKind::GbdtStandard | ModelKind::GbdtExpert) if pretraining => {
            return Err(Error::Config(format!("pretrain does not train {k:?} models")).into())
        }
        k => vec![k],
    };
    let nested = kinds.len() > 1;
    for kind in kinds {
        let dir = |name: &str| if nested { out.join(name) } else { out.clone() };
        match kind {
            ModelKind::Full | ModelKind::CnnOnly => {
                let model = neural_config(&cfg, kind);
                println!("training {} on {}", architecture_name(&model), task.as_str());
                let (ckpt, report) = if pretraining {
                    pretrain(&dataset, &plan, spec, &model, &cfg.train)?
                } else {
                    train_task(&dataset, &plan, spec, &model, &cfg.train)?
                };
                save_neural(&dir(architecture_name(&model)), &ckpt, report)?;
            }
            ModelKind::GbdtStandard | ModelKind::GbdtExpert => {
                let set = if kind == ModelKind::GbdtStandard {
                    FeatureSet::Standard
                } else {
                    FeatureSet::Expert
                };
                println!("training {} on {}", gbdt_name(set), task.as_str());
                let model = train_gbdt_on_plan(&dataset, &plan, &gbdt_config(&cfg, set))?;
                save_gbdt(&dir(gbdt_name(set)), &model, n_gbdt_train)?;
            }
            ModelKind::All => unreachable!("expanded above"),
        }
    }
    run.manifest(if pretraining { "pretrain" } else { "train" }, &cfg, &out)
}

fn write_ids(path: &Path, dataset: &Dataset, users: &[usize]) -> Result<()> {
    let mut text = String::new();
    for &u in users {
        text.push_str(&dataset.participants[u].series.participant_id);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn finetune_cmd(run: &Run, mut cfg: ExperimentConfig, a: FinetuneArgs) -> Result<()> {
    apply_data_args(&mut cfg, &a.data);
    apply_train_flags(&mut cfg, &a.train);
    if let Some(k) = a.k {
        cfg.finetune.k = k;
    }
    if let Some(s) = a.cohort_seed {
        cfg.finetune.seed = s;
    }
    let pretrained = a.from.as_deref().map(load_checkpoint).transpose()?;
    let task = resolve_task(&cfg);
    cfg.task = Some(task);
    cfg.train.task = task;
    let dataset = load_dir(cfg.data_dir()?)?;
    let out = cfg.out_dir()?.to_path_buf();
    let plan = plan(&cfg, &dataset, task)?;
    let spec = cfg.window.spec();
    let (cohort, holdout) = select_finetune_cohort(&plan.test_users, cfg.finetune.k, cfg.finetune.seed)?;
    ensure_dir(&out)?;
    write_ids(&out.join("cohort.txt"), &dataset, &cohort)?;
    write_ids(&out.join("holdout.txt"), &dataset, &holdout)?;
    println!("cohort {} users, holdout {} users", cohort.len(), holdout.len());

    match (&pretrained, a.model_kind) {
        (Some(ckpt), ModelKind::Full | ModelKind::CnnOnly) => {
            if ckpt.config.input_length != spec.length() {
                return Err(Error::Config(format!(
                    "checkpoint expects input length {}, window gives {}",
                    ckpt.config.input_length,
                    spec.length()
                ))
                .into());
            }
            let (tuned, report) = finetune(ckpt, &dataset, &plan, &cohort, spec, &cfg.train)?;
            save_neural(&out, &tuned, report)?;
        }
        (Some(_), k) => {
            return Err(Error::Config(format!("--from applies to neural models, not {k:?}")).into());
        }
        (None, ModelKind::Full | ModelKind::CnnOnly) => {
            let model = neural_config(&cfg, a.model_kind);
            let (ckpt, report) = train_on_cohort(&dataset, &plan, &cohort, spec, &model, &cfg.train)?;
            save_neural(&out, &ckpt, report)?;
        }
        (None, ModelKind::GbdtStandard | ModelKind::GbdtExpert) => {
            let set = if a.model_kind == ModelKind::GbdtStandard {
                FeatureSet::Standard
            } else {
                FeatureSet::Expert
            };
            let model = train_gbdt_on_cohort(&dataset, &plan, &cohort, &gbdt_config(&cfg, set))?;
            save_gbdt(&out, &model, plan.test_examples_of(&cohort).len())?;
        }
        (None, ModelKind::All) => {
            return Err(Error::Config("finetune trains one model; pick a --model-kind".into()).into());
        }
    }
    run.manifest("finetune", &cfg, &out)
}

enum LoadedModel {
    Neural(Checkpoint),
    Trees(GbdtModel),
}

impl LoadedModel {
    fn load(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Ok(Self::Trees(GbdtModel::load(path)?)),
            _ => Ok(Self::Neural(load_checkpoint(path)?)),
        }
    }

    fn task_and_boundary(&self) -> Result<(Task, chrono::NaiveDate, &[String])> {
        match self {
            Self::Neural(c) => {
                let p = c
                    .provenance
                    .as_ref()
                    .ok_or_else(|| Error::Leakage(format!("checkpoint '{}' has no split provenance", c.tag)))?;
                Ok((p.task, p.boundary_day, &p.test_period_users))
            }
            Self::Trees(m) => Ok((m.provenance.task, m.provenance.boundary_day, &m.provenance.test_period_users)),
        }
    }

    fn default_name(&self) -> &'static str {
        match self {
            Self::Neural(c) => architecture_name(&c.config),
            Self::Trees(m) => gbdt_name(m.config.feature_set),
        }
    }
}

fn evaluate(run: &Run, mut cfg: ExperimentConfig, a: EvaluateArgs) -> Result<()> {
    apply_data_args(&mut cfg, &a.data);
    let model = LoadedModel::load(&a.model)?;
    let (task, boundary, trained_users) = model.task_and_boundary()?;
    if let Some(t) = cfg.task {
        if t != task {
            return Err(Error::Config(format!("model was trained on {task}, evaluation asks for {t}")).into());
        }
    }
    cfg.task = Some(task);
    if cfg.split.boundary_day.is_none() {
        cfg.split.boundary_day = Some(boundary);
    }
    match &model {
        LoadedModel::Trees(m) => cfg.window.lookback_days = m.lookback_days,
        LoadedModel::Neural(c) => {
            let length = cfg.window.spec().length();
            if c.config.input_length != length {
                return Err(Error::Config(format!(
                    "checkpoint expects input length {}, window gives {length}; check --lookback-days and --resolution",
                    c.config.input_length
                ))
                .into());
            }
        }
    }
    let dataset = load_dir(cfg.data_dir()?)?;
    let out = cfg.out_dir()?.to_path_buf();
    let plan = plan(&cfg, &dataset, task)?;
    let keys: Vec<ExampleKey> = match a.period {
        Period::Test => {
            let excluded: BTreeSet<usize> = trained_users.iter().filter_map(|id| dataset.index_of(id)).collect();
            plan.test.iter().filter(|k| !excluded.contains(&k.participant)).copied().collect()
        }
        // scored only so that the guard can refuse them
        Period::Train => plan.train.clone(),
    };
    let keys = match &a.users {
        Some(path) => {
            let wanted = read_user_list(path, &dataset)?;
            keys.into_iter().filter(|k| wanted.contains(&k.participant)).collect()
        }
        None => keys,
    };
    let name = a.name.clone().unwrap_or_else(|| model.default_name().to_string());
    let set = match &model {
        LoadedModel::Neural(c) => evaluate_checkpoint(&name, c, &dataset, &keys, cfg.window.spec())?,
        LoadedModel::Trees(m) => evaluate_gbdt(&name, m, &dataset, &keys)?,
    };
    ensure_dir(&out)?;
    let stem = task.as_str();
    write_json(&out.join(format!("predictions_{stem}.json")), &set)?;
    set.write_csv(&out.join(format!("predictions_{stem}.csv")))?;
    let metrics = MetricsEntry::from_set(&set)?;
    write_json(&out.join(format!("metrics_{stem}.json")), &metrics)?;
    export_roc_curve(&set, &out.join(format!("roc_{stem}.csv")))?;
    println!(
        "{name} {stem}: roc_auc {:.4} over {} examples ({} positive)",
        metrics.roc_auc, metrics.n_total, metrics.n_positive
    );
    run.manifest("evaluate", &cfg, &out)
}

/// Dataset indices of the ids listed in `path`; unknown ids are an error.
fn read_user_list(path: &Path, dataset: &Dataset) -> Result<BTreeSet<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            dataset
                .index_of(id)
                .ok_or_else(|| Error::Validation(format!("{}: unknown participant {id}", path.display())).into())
        })
        .collect()
}

fn read_predictions(path: &Path) -> Result<PredictionSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let set: PredictionSet =
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    set.validate()?;
    Ok(set)
}

fn report(run: &Run, a: ReportArgs) -> Result<()> {
    let mut sets = Vec::new();
    for path in &a.runs {
        if path.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(path)
                .with_context(|| format!("listing {}", path.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("predictions_") && n.ends_with(".json"))
                })
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Config(format!("{} holds no predictions_*.json", path.display())).into());
            }
            for f in files {
                sets.push(read_predictions(&f)?);
            }
        } else {
            sets.push(read_predictions(path)?);
        }
    }
    let comparison = compare_runs(&sets)?;
    print!("{}", comparison.table);
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        write_json(&out.join("report.json"), &comparison.report)?;
        fs::write(out.join("table.txt"), &comparison.table)?;
        let cfg = ExperimentConfig::default();
        run.manifest("report", &cfg, out)?;
    }
    Ok(())
}
