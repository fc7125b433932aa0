//! Gradient-boosted regression trees on the logistic loss.
//!
//! Exact greedy splits on presorted feature values with Newton leaf values
//! `-G / H` and no penalty terms. A split sends `x <= threshold` left, and
//! thresholds are always values seen in training. Candidate splits are
//! scanned in feature order, then threshold order, and only a strictly larger
//! gain replaces the incumbent, so ties go to the lowest feature index and
//! then the lowest threshold.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::numerics::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub feature_set: FeatureSet,
    /// Recorded for reproducibility; the exact greedy learner draws nothing.
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            n_rounds: 200,
            max_depth: 4,
            learning_rate: 0.1,
            min_samples_leaf: 5,
            feature_set: FeatureSet::Standard,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rounds == 0 {
            return Err(Error::Config("n_rounds must be >= 1".into()));
        }
        if self.max_depth == 0 {
            return Err(Error::Config("max_depth must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Config("min_samples_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        gain: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Adds `delta` to every leaf.
    pub fn shift_leaves(&mut self, delta: f64) {
        match self {
            TreeNode::Leaf { value } => *value += delta,
            TreeNode::Split { left, right, .. } => {
                left.shift_leaves(delta);
                right.shift_leaves(delta);
            }
        }
    }

    fn add_gains(&self, out: &mut [f64]) {
        if let TreeNode::Split {
            feature,
            gain,
            left,
            right,
            ..
        } = self
        {
            out[*feature] += gain;
            left.add_gains(out);
            right.add_gains(out);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub n_features: usize,
    /// Prior log-odds of the training labels.
    pub initial_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<TreeNode>,
}

impl TreeEnsemble {
    /// Ensemble without trees predicting `base_rate` everywhere.
    pub fn prior(n_features: usize, base_rate: f64, learning_rate: f64) -> Self {
        Self {
            n_features,
            initial_score: (base_rate / (1.0 - base_rate)).ln(),
            learning_rate,
            trees: Vec::new(),
        }
    }

    pub fn raw_score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::shape("gbdt_predict", &[self.n_features], &[x.len()]));
        }
        Ok(self.initial_score + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>())
    }

    /// Score in (0, 1).
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.raw_score(x).map(sigmoid)
    }

    /// Total split gain per feature.
    pub fn feature_importance(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_features];
        for t in &self.trees {
            t.add_gains(&mut out);
        }
        out
    }

    /// Writes `feature,name,gain` rows; `names` may be shorter than the
    /// feature count.
    pub fn write_importance_csv(&self, names: &[String], out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["feature", "name", "gain"])?;
        for (i, g) in self.feature_importance().iter().enumerate() {
            let name = names.get(i).cloned().unwrap_or_default();
            w.write_record([i.to_string(), name, g.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn logistic_loss(scores: &[f64], labels: &[bool]) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let s = if y { z } else { -z };
            -crate::numerics::log_sigmoid(s)
        })
        .sum();
    total / scores.len() as f64
}

/// Split score `G² / H` of one side.
fn side_score(g: f64, h: f64) -> f64 {
    if h > 0.0 {
        g * g / h
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

#[derive(Clone, Copy)]
struct NodeStats {
    g: f64,
    h: f64,
    n: usize,
}

struct Arena {
    nodes: Vec<ArenaNode>,
}

enum ArenaNode {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        gain: f64,
        left: usize,
        right: usize,
    },
}

impl Arena {
    fn build(&self, i: usize) -> TreeNode {
        match self.nodes[i] {
            ArenaNode::Leaf(value) => TreeNode::Leaf { value },
            ArenaNode::Split {
                feature,
                threshold,
                gain,
                left,
                right,
            } => TreeNode::Split {
                feature,
                threshold,
                gain,
                left: Box::new(self.build(left)),
                right: Box::new(self.build(right)),
            },
        }
    }
}

/// Best split of every open node along one feature.
fn scan_feature(
    feature: usize,
    order: &[usize],
    x: &[Vec<f64>],
    grad: &[f64],
    hess: &[f64],
    node_of: &[usize],
    open: &[Option<NodeStats>],
    min_leaf: usize,
) -> Vec<Option<Candidate>> {
    let k = open.len();
    let mut left = vec![(0.0f64, 0.0f64, 0usize); k];
    let mut last = vec![f64::NAN; k];
    let mut best: Vec<Option<Candidate>> = vec![None; k];
    for &i in order {
        let node = node_of[i];
        let Some(total) = open.get(node).copied().flatten() else {
            continue;
        };
        let v = x[i][feature];
        let (gl, hl, nl) = left[node];
        if nl > 0 && v != last[node] && nl >= min_leaf && total.n - nl >= min_leaf {
            let gain = side_score(gl, hl) + side_score(total.g - gl, total.h - hl) - side_score(total.g, total.h);
            if best[node].is_none_or(|b| gain > b.gain) {
                best[node] = Some(Candidate {
                    gain,
                    feature,
                    threshold: last[node],
                });
            }
        }
        left[node] = (gl + grad[i], hl + hess[i], nl + 1);
        last[node] = v;
    }
    best
}

fn fit_tree(
    x: &[Vec<f64>],
    grad: &[f64],
    hess: &[f64],
    sorted: &[Vec<usize>],
    cfg: &GbdtConfig,
) -> TreeNode {
    let n = x.len();
    let mut arena = Arena { nodes: Vec::new() };
    // level-local node ids; `usize::MAX` marks finished samples
    let mut node_of = vec![0usize; n];
    let mut level_arena = vec![0usize];
    arena.nodes.push(ArenaNode::Leaf(0.0));
    let stats = |members: &mut dyn Iterator<Item = usize>| {
        let mut s = NodeStats { g: 0.0, h: 0.0, n: 0 };
        for i in members {
            s.g += grad[i];
            s.h += hess[i];
            s.n += 1;
        }
        s
    };
    let mut level_stats = vec![stats(&mut (0..n))];
    for depth in 0..=cfg.max_depth {
        let k = level_stats.len();
        let open: Vec<Option<NodeStats>> = level_stats
            .iter()
            .map(|s| (depth < cfg.max_depth && s.n >= 2 * cfg.min_samples_leaf).then_some(*s))
            .collect();
        let per_feature: Vec<Vec<Option<Candidate>>> = (0..sorted.len())
            .into_par_iter()
            .map(|f| scan_feature(f, &sorted[f], x, grad, hess, &node_of, &open, cfg.min_samples_leaf))
            .collect();
        let mut best: Vec<Option<Candidate>> = vec![None; k];
        for cands in &per_feature {
            for (b, c) in best.iter_mut().zip(cands) {
                if let Some(c) = c {
                    if b.is_none_or(|bb| c.gain > bb.gain) {
                        *b = Some(*c);
                    }
                }
            }
        }
        let mut next_stats = Vec::new();
        let mut next_arena = Vec::new();
        let mut remap = vec![(usize::MAX, usize::MAX); k];
        for node in 0..k {
            let s = level_stats[node];
            match best[node] {
                Some(c) if c.gain > 1e-12 * (1.0 + s.g.abs()) => {
                    let l = arena.nodes.len();
                    arena.nodes.push(ArenaNode::Leaf(0.0));
                    arena.nodes.push(ArenaNode::Leaf(0.0));
                    arena.nodes[level_arena[node]] = ArenaNode::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        gain: c.gain,
                        left: l,
                        right: l + 1,
                    };
                    remap[node] = (next_stats.len(), next_stats.len() + 1);
                    next_arena.push(l);
                    next_arena.push(l + 1);
                    next_stats.push(NodeStats { g: 0.0, h: 0.0, n: 0 });
                    next_stats.push(NodeStats { g: 0.0, h: 0.0, n: 0 });
                }
                _ => {
                    let value = if s.h > 0.0 { -s.g / s.h } else { 0.0 };
                    arena.nodes[level_arena[node]] = ArenaNode::Leaf(value);
                }
            }
        }
        if next_stats.is_empty() {
            break;
        }
        for i in 0..n {
            let node = node_of[i];
            if node == usize::MAX {
                continue;
            }
            let (l, r) = remap[node];
            if l == usize::MAX {
                node_of[i] = usize::MAX;
                continue;
            }
            let Some(c) = best[node] else { unreachable!() };
            let child = if x[i][c.feature] <= c.threshold { l } else { r };
            node_of[i] = child;
            let s = &mut next_stats[child];
            s.g += grad[i];
            s.h += hess[i];
            s.n += 1;
        }
        level_stats = next_stats;
        level_arena = next_arena;
    }
    arena.build(0)
}

/// Fits `config.n_rounds` trees to rows `x` with binary `labels`.
pub fn gbdt_train(x: &[Vec<f64>], labels: &[bool], config: &GbdtConfig) -> Result<TreeEnsemble> {
    gbdt_train_traced(x, labels, config).map(|(e, _)| e)
}

/// As [`gbdt_train`], also returning the training loss before the first
/// round and after every round.
pub fn gbdt_train_traced(x: &[Vec<f64>], labels: &[bool], config: &GbdtConfig) -> Result<(TreeEnsemble, Vec<f64>)> {
    config.validate()?;
    let n = x.len();
    if n != labels.len() {
        return Err(Error::shape("gbdt_train", &[n], &[labels.len()]));
    }
    if n < 2 {
        return Err(Error::SingleClass(format!("gbdt needs at least 2 examples, got {n}")));
    }
    let d = x[0].len();
    if let Some(r) = x.iter().position(|r| r.len() != d) {
        return Err(Error::shape("gbdt_train row", &[d], &[x[r].len()]));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("gbdt features must be finite".into()));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == n {
        return Err(Error::SingleClass(format!("{n} examples, {pos} positive")));
    }
    let mut ensemble = TreeEnsemble::prior(d, pos as f64 / n as f64, config.learning_rate);
    let sorted: Vec<Vec<usize>> = (0..d)
        .into_par_iter()
        .map(|f| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let mut raw = vec![ensemble.initial_score; n];
    let mut trace = vec![logistic_loss(&raw, labels)];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for _ in 0..config.n_rounds {
        for i in 0..n {
            let p = sigmoid(raw[i]);
            grad[i] = p - labels[i] as u8 as f64;
            hess[i] = p * (1.0 - p);
        }
        let tree = fit_tree(x, &grad, &hess, &sorted, config);
        for i in 0..n {
            raw[i] += config.learning_rate * tree.predict(&x[i]);
        }
        ensemble.trees.push(tree);
        trace.push(logistic_loss(&raw, labels));
    }
    Ok((ensemble, trace))
}

pub fn gbdt_predict(ensemble: &TreeEnsemble, x: &[f64]) -> Result<f64> {
    ensemble.predict(x)
}
