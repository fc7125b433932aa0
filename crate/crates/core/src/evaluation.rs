//! Test-period scoring, ROC AUC and run comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{window_for_key, Dataset, ExampleKey, Task, Window, WindowSpec};
use crate::error::{Error, Result};
use crate::features::FeatureWindow;
use crate::model::{predict_logit, score, Checkpoint};
use crate::numerics::Tensor;

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc_auc", &[scores.len()], &[labels.len()]));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::UndefinedMetric(format!("score {i} is not finite")));
    }
    let pos = labels.iter().filter(|&&y| y).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Twice the concordance count: each correctly ordered pair counts 2, each
/// tied pair 1.
fn doubled_concordance(scores: &[f64], labels: &[bool]) -> u64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut neg_below = 0u64;
    let mut total = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        total += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    total
}

/// Probability that a random positive outscores a random negative, with ties
/// credited one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    Ok(doubled_concordance(scores, labels) as f64 / (2 * pos * neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores at or above the threshold are called positive; the first
    /// point has an infinite threshold.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve with one vertex per distinct score; vertices on a straight
/// segment between their neighbours are dropped.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // integer (fp, tp) vertices let collinearity be decided exactly
    let mut vertices = vec![(f64::INFINITY, 0u64, 0u64)];
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        vertices.push((s, fp, tp));
    }
    let mut kept: Vec<(f64, u64, u64)> = Vec::with_capacity(vertices.len());
    for v in vertices {
        while kept.len() >= 2 {
            let (_, f1, t1) = kept[kept.len() - 2];
            let (_, f2, t2) = kept[kept.len() - 1];
            let (_, f3, t3) = v;
            if (f2 - f1) * (t3 - t2) == (t2 - t1) * (f3 - f2) {
                kept.pop();
            } else {
                break;
            }
        }
        kept.push(v);
    }
    Ok(kept
        .into_iter()
        .map(|(threshold, f, t)| RocPoint {
            threshold,
            fpr: f as f64 / neg as f64,
            tpr: t as f64 / pos as f64,
        })
        .collect())
}

/// Area under a piecewise-linear curve.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub participant_id: String,
    pub target_day: NaiveDate,
    pub score: f64,
    pub label: bool,
}

/// Scores of one model on one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub task: Task,
    pub model: String,
    pub predictions: Vec<Prediction>,
}

impl PredictionSet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for p in &self.predictions {
            if !p.score.is_finite() || !(0.0..=1.0).contains(&p.score) {
                return Err(Error::Validation(format!(
                    "{}: score {} for {} on {} is outside [0, 1]",
                    self.model, p.score, p.participant_id, p.target_day
                )));
            }
            if !seen.insert((&p.participant_id, p.target_day)) {
                return Err(Error::Validation(format!(
                    "{}: duplicate prediction for {} on {}",
                    self.model, p.participant_id, p.target_day
                )));
            }
        }
        Ok(())
    }

    pub fn scores(&self) -> Vec<f64> {
        self.predictions.iter().map(|p| p.score).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.predictions.iter().map(|p| p.label).collect()
    }

    pub fn auc(&self) -> Result<f64> {
        roc_auc(&self.scores(), &self.labels())
    }

    pub fn curve(&self) -> Result<Vec<RocPoint>> {
        roc_curve(&self.scores(), &self.labels())
    }

    /// `(participant, day, label)` triples, sorted.
    pub fn example_set(&self) -> BTreeSet<(String, NaiveDate, bool)> {
        self.predictions
            .iter()
            .map(|p| (p.participant_id.clone(), p.target_day, p.label))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["participant_id", "target_day", "score", "label"])?;
        for p in &self.predictions {
            w.write_record([
                p.participant_id.clone(),
                p.target_day.to_string(),
                p.score.to_string(),
                (p.label as u8).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rules a test-period example must satisfy to be scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageGuard {
    /// No scored window may start before this day.
    pub boundary_day: NaiveDate,
    /// Participants whose test-period data was used for training.
    pub excluded_users: BTreeSet<String>,
}

impl LeakageGuard {
    pub fn new(boundary_day: NaiveDate) -> Self {
        Self {
            boundary_day,
            excluded_users: BTreeSet::new(),
        }
    }

    pub fn check(&self, participant_id: &str, first_day: NaiveDate, target_day: NaiveDate) -> Result<()> {
        if first_day < self.boundary_day {
            return Err(Error::Leakage(format!(
                "window for {participant_id} on {target_day} starts {first_day}, before the test period begins {}",
                self.boundary_day
            )));
        }
        if first_day >= target_day {
            return Err(Error::Leakage(format!(
                "window for {participant_id} does not precede its target day {target_day}"
            )));
        }
        if self.excluded_users.contains(participant_id) {
            return Err(Error::Leakage(format!(
                "{participant_id} contributed training data and cannot be evaluated"
            )));
        }
        Ok(())
    }
}

/// Scores every labeled window with a model that sees only the channels.
pub fn evaluate_windows<F>(
    model: &str,
    task: Task,
    windows: &[Window],
    guard: &LeakageGuard,
    scorer: F,
) -> Result<PredictionSet>
where
    F: Fn(&Tensor) -> Result<f64> + Sync,
{
    let labeled: Vec<&Window> = windows.iter().filter(|w| w.label.is_some()).collect();
    for w in &labeled {
        guard.check(&w.participant_id, w.first_day, w.target_day)?;
    }
    let scores: Vec<f64> = labeled.par_iter().map(|w| scorer(&w.channels)).collect::<Result<_>>()?;
    let set = PredictionSet {
        task,
        model: model.to_string(),
        predictions: labeled
            .iter()
            .zip(scores)
            .map(|(w, score)| Prediction {
                participant_id: w.participant_id.clone(),
                target_day: w.target_day,
                score,
                label: w.label.unwrap(),
            })
            .collect(),
    };
    set.validate()?;
    Ok(set)
}

impl LeakageGuard {
    /// Guard for a checkpoint: the recorded split boundary plus every
    /// participant whose test-period data it was trained on.
    pub fn for_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let prov = ckpt
            .provenance
            .as_ref()
            .ok_or_else(|| Error::Leakage(format!("checkpoint '{}' has no split provenance", ckpt.tag)))?;
        Ok(Self {
            boundary_day: prov.boundary_day,
            excluded_users: prov.test_period_users.iter().cloned().collect(),
        })
    }
}

/// Scores test-period examples with a checkpoint, building each window on
/// demand. The guard comes from the checkpoint's provenance.
pub fn evaluate_checkpoint(
    model: &str,
    ckpt: &Checkpoint,
    dataset: &Dataset,
    keys: &[ExampleKey],
    spec: WindowSpec,
) -> Result<PredictionSet> {
    let guard = LeakageGuard::for_checkpoint(ckpt)?;
    let task = ckpt.provenance.as_ref().map(|p| p.task).expect("checked by the guard");
    let predictions: Vec<Prediction> = keys
        .par_iter()
        .map(|k| {
            let w = window_for_key(dataset, k, spec);
            guard.check(&w.participant_id, w.first_day, w.target_day)?;
            let logit = predict_logit(&w.channels, &ckpt.params, &ckpt.config)?;
            Ok(Prediction {
                participant_id: w.participant_id,
                target_day: w.target_day,
                score: score(logit),
                label: k.label,
            })
        })
        .collect::<Result<_>>()?;
    let set = PredictionSet {
        task,
        model: model.to_string(),
        predictions,
    };
    set.validate()?;
    Ok(set)
}

/// Scores feature windows with a model that sees only the feature vector.
pub fn evaluate_feature_windows<F>(
    model: &str,
    task: Task,
    windows: &[FeatureWindow],
    guard: &LeakageGuard,
    scorer: F,
) -> Result<PredictionSet>
where
    F: Fn(&FeatureWindow) -> Result<f64> + Sync,
{
    for w in windows {
        guard.check(&w.participant_id, w.first_day, w.target_day)?;
    }
    let scores: Vec<f64> = windows.par_iter().map(&scorer).collect::<Result<_>>()?;
    let set = PredictionSet {
        task,
        model: model.to_string(),
        predictions: windows
            .iter()
            .zip(scores)
            .map(|(w, score)| Prediction {
                participant_id: w.participant_id.clone(),
                target_day: w.target_day,
                score,
                label: w.label(),
            })
            .collect(),
    };
    set.validate()?;
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub task: Task,
    pub model: String,
    pub roc_auc: f64,
    pub n_positive: usize,
    pub n_total: usize,
    pub roc_curve: Vec<RocPoint>,
}

impl MetricsEntry {
    pub fn from_set(set: &PredictionSet) -> Result<Self> {
        Ok(Self {
            task: set.task,
            model: set.model.clone(),
            roc_auc: set.auc()?,
            n_positive: set.predictions.iter().filter(|p| p.label).count(),
            n_total: set.predictions.len(),
            roc_curve: set.curve()?,
        })
    }
}

/// AUC difference of a model against the first model of the same task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub task: Task,
    pub model: String,
    pub reference: String,
    pub absolute: f64,
    pub relative: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub entries: Vec<MetricsEntry>,
    pub deltas: Vec<Delta>,
}

impl MetricsReport {
    pub fn get(&self, task: Task, model: &str) -> Option<&MetricsEntry> {
        self.entries.iter().find(|e| e.task == task && e.model == model)
    }
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub report: MetricsReport,
    pub table: String,
}

/// Builds the task × model AUC grid.
///
/// All sets of one task must cover the same labeled examples.
pub fn compare_runs(sets: &[PredictionSet]) -> Result<Comparison> {
    if sets.is_empty() {
        return Err(Error::Config("no prediction sets to compare".into()));
    }
    let mut models: Vec<String> = Vec::new();
    let mut by_task: BTreeMap<Task, Vec<&PredictionSet>> = BTreeMap::new();
    for s in sets {
        if !models.contains(&s.model) {
            models.push(s.model.clone());
        }
        let group = by_task.entry(s.task).or_default();
        if group.iter().any(|g| g.model == s.model) {
            return Err(Error::Validation(format!("model {} appears twice for task {}", s.model, s.task)));
        }
        group.push(s);
    }
    let mut report = MetricsReport::default();
    for (task, group) in &by_task {
        let reference = group[0].example_set();
        for s in &group[1..] {
            let other = s.example_set();
            if other != reference {
                let missing: Vec<_> = reference.difference(&other).take(3).collect();
                let extra: Vec<_> = other.difference(&reference).take(3).collect();
                return Err(Error::Validation(format!(
                    "{task}: {} and {} score different examples; only in {}: {missing:?}; only in {}: {extra:?}",
                    group[0].model, s.model, group[0].model, s.model
                )));
            }
        }
        for s in group {
            report.entries.push(MetricsEntry::from_set(s)?);
        }
        let base = report.get(*task, &group[0].model).unwrap().roc_auc;
        for s in &group[1..] {
            let auc = report.get(*task, &s.model).unwrap().roc_auc;
            report.deltas.push(Delta {
                task: *task,
                model: s.model.clone(),
                reference: group[0].model.clone(),
                absolute: auc - base,
                relative: if base > 0.0 { (auc - base) / base } else { f64::NAN },
            });
        }
    }
    let table = render_table(&report, &models, by_task.keys().copied());
    Ok(Comparison { report, table })
}

fn render_table(report: &MetricsReport, models: &[String], tasks: impl Iterator<Item = Task>) -> String {
    let tasks: Vec<Task> = tasks.collect();
    let first = tasks.iter().map(|t| t.title().len()).max().unwrap_or(4).max(4);
    let widths: Vec<usize> = models.iter().map(|m| m.len().max(5)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<first$}", "Task");
    for (m, w) in models.iter().zip(&widths) {
        let _ = write!(out, "  {m:>w$}");
    }
    out.push('\n');
    let total = first + widths.iter().map(|w| w + 2).sum::<usize>();
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for t in tasks {
        let _ = write!(out, "{:<first$}", t.title());
        for (m, w) in models.iter().zip(&widths) {
            match report.get(t, m) {
                Some(e) => {
                    let _ = write!(out, "  {:>w$.3}", e.roc_auc);
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `threshold,fpr,tpr` rows under a `# auc=` comment line.
pub fn export_roc_curve(set: &PredictionSet, path: &Path) -> Result<()> {
    let auc = set.auc()?;
    let curve = set.curve()?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# auc={auc}")?;
    writeln!(w, "threshold,fpr,tpr")?;
    for p in &curve {
        writeln!(w, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`export_roc_curve`].
pub fn read_roc_curve(path: &Path) -> Result<(f64, Vec<RocPoint>)> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut auc = None;
    let mut points = Vec::new();
    let bad = |line: usize, m: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: m.to_string(),
    };
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if let Some(v) = line.strip_prefix("# auc=") {
            auc = Some(v.parse().map_err(|_| bad(n, "bad auc"))?);
        } else if line == "threshold,fpr,tpr" || line.is_empty() {
            continue;
        } else {
            let f: Vec<f64> = line
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(n, "bad number"))?;
            if f.len() != 3 {
                return Err(bad(n, "expected three fields"));
            }
            points.push(RocPoint {
                threshold: f[0],
                fpr: f[1],
                tpr: f[2],
            });
        }
    }
    Ok((auc.ok_or_else(|| bad(1, "missing auc comment"))?, points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_examples() {
        let s = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(roc_auc(&s, &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&s, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&s, &[true; 4]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn perfect_curve_has_three_vertices() {
        let c = roc_curve(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        let pts: Vec<(f64, f64)> = c.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        assert_eq!(c[1].threshold, 0.8);
    }
}
