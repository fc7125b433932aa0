#![allow(dead_code)]

use std::collections::BTreeSet;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sensorformer::baselines::GbdtConfig;
use sensorformer::data::ParticipantSeries;
use sensorformer::model::{init_params, logit_graph, prepare_input, ConvSpec, ModelConfig, ModelParams, ParamVars};
use sensorformer::{Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Central finite differences of a scalar function of several tensors.
///
/// Independent of the tape's backward pass: only forward values are used.
pub fn numeric_gradients(
    params: &[Tensor],
    mut loss: impl FnMut(&[Tensor]) -> f64,
) -> Vec<Tensor> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + FD_STEP;
            let up = loss(&work);
            work[p].data_mut()[i] = orig - FD_STEP;
            let down = loss(&work);
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

/// Builds `graph` on fresh tapes and compares the analytic gradient of every
/// parameter with central differences. Returns the per-parameter errors.
pub fn gradient_errors(
    params: &[Tensor],
    graph: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = graph(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect();

    let numeric = numeric_gradients(params, |ps| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let l = graph(&mut t, &vs).unwrap();
        t.value(l).item()
    });
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect()
}

// Model gradients

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        conv_spec: vec![ConvSpec::new(4, 2, 8), ConvSpec::new(3, 2, 8), ConvSpec::new(1, 2, 8)],
        n_transformer_layers: 1,
        n_heads: 2,
        ffn_hidden: 16,
        dropout_rate: 0.0,
        input_length: 64,
        ..ModelConfig::default()
    }
}

pub fn loss_value(params: &ModelParams, config: &ModelConfig, x: &Tensor, label: f64) -> f64 {
    let mut tape = Tape::new();
    let p = ParamVars::enter(&mut tape, params, false);
    let input = tape.constant(prepare_input(x, params, config).unwrap());
    let logit = logit_graph(&mut tape, &p, config, input, None).unwrap();
    let loss = tape.focal_loss(logit, &[label], 2.0, 0.25).unwrap();
    tape.value(loss).item()
}

pub fn analytic_and_numeric(config: &ModelConfig, seed: u64, label: f64) -> Vec<(String, Tensor, Tensor)> {
    let params = init_params(config, seed).unwrap();
    let x = random_tensor(&mut rng(seed + 100), &[6, config.input_length], 1.0);

    let mut tape = Tape::new();
    let p = ParamVars::enter(&mut tape, &params, true);
    let input = tape.constant(prepare_input(&x, &params, config).unwrap());
    let logit = logit_graph(&mut tape, &p, config, input, None).unwrap();
    let loss = tape.focal_loss(logit, &[label], 2.0, 0.25).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = p.vars().iter().map(|v| grads.take(*v).unwrap()).collect();

    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let tensors: Vec<Tensor> = params.tensors.values().cloned().collect();
    let numeric = numeric_gradients(&tensors, |ts| {
        let mut q = params.clone();
        for (slot, t) in q.tensors.values_mut().zip(ts) {
            *slot = t.clone();
        }
        loss_value(&q, config, &x, label)
    });
    names
        .into_iter()
        .zip(analytic)
        .zip(numeric)
        .map(|((n, a), b)| (n, a, b))
        .collect()
}

// Boosted-tree stumps

pub fn stump_config(min_leaf: usize) -> GbdtConfig {
    GbdtConfig {
        n_rounds: 1,
        max_depth: 1,
        learning_rate: 0.1,
        min_samples_leaf: min_leaf,
        ..Default::default()
    }
}

pub struct OracleSplit {
    pub gain: f64,
    pub feature: usize,
    pub threshold: f64,
    pub left: f64,
    pub right: f64,
}

/// Every (feature, observed value) stump, scored from scratch.
pub fn all_stumps(x: &[Vec<f64>], y: &[bool], min_leaf: usize) -> Vec<OracleSplit> {
    let n = x.len();
    let base = y.iter().filter(|&&v| v).count() as f64 / n as f64;
    let g: Vec<f64> = y.iter().map(|&v| base - v as u8 as f64).collect();
    let h = base * (1.0 - base);
    let score = |gs: f64, hs: f64| gs * gs / hs;
    let g_all: f64 = g.iter().sum();
    let parent = score(g_all, h * n as f64);
    let mut out = Vec::new();
    for f in 0..x[0].len() {
        let values: BTreeSet<u64> = x.iter().map(|r| r[f].to_bits()).collect();
        for t in values.into_iter().map(f64::from_bits) {
            let left: Vec<usize> = (0..n).filter(|&i| x[i][f] <= t).collect();
            let nl = left.len();
            if nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let gl: f64 = left.iter().map(|&i| g[i]).sum();
            let gr: f64 = (0..n).filter(|&i| x[i][f] > t).map(|i| g[i]).sum();
            let (hl, hr) = (h * nl as f64, h * (n - nl) as f64);
            out.push(OracleSplit {
                gain: score(gl, hl) + score(gr, hr) - parent,
                feature: f,
                threshold: t,
                left: -gl / hl,
                right: -gr / hr,
            });
        }
    }
    out
}

pub fn random_dataset(r: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<bool>) {
    let n = r.random_range(10..=200);
    let d = r.random_range(1..=5);
    let levels = r.random_range(2..=30);
    loop {
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| r.random_range(0..levels) as f64 * 0.5).collect())
            .collect();
        let w: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<bool> = x
            .iter()
            .map(|row| {
                let s: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
                r.random_bool(1.0 / (1.0 + (-(s - levels as f64 * 0.1)).exp()))
            })
            .collect();
        if y.iter().any(|&v| v) && y.iter().any(|&v| !v) {
            return (x, y);
        }
    }
}

// ROC AUC

/// Pairwise concordance: each positive-negative pair scores 2 when ordered
/// correctly and 1 when tied.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut doubled = 0u64;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &yi) in labels.iter().enumerate() {
        if yi {
            p += 1;
        } else {
            n += 1;
        }
        if !yi {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj {
                continue;
            }
            doubled += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    doubled as f64 / (2 * p * n) as f64
}

pub fn random_instance(r: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    let n = r.random_range(2..=500);
    // coarse grids force ties
    let levels = if r.random_bool(0.5) { r.random_range(1..=10) } else { 1_000_000 };
    let rate = r.random_range(0.05..0.95);
    loop {
        let labels: Vec<bool> = (0..n).map(|_| r.random_bool(rate)).collect();
        if labels.iter().any(|&y| y) && labels.iter().any(|&y| !y) {
            let scores = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
            return (scores, labels);
        }
    }
}

// Day features

pub fn present_day() -> ParticipantSeries {
    let mut s = ParticipantSeries::empty("a", NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), 1);
    s.missing_steps.fill(false);
    s.missing_hr.fill(false);
    s.missing_sleep.fill(false);
    s
}

pub fn fill(s: &mut ParticipantSeries, range: std::ops::Range<usize>, steps: f32, hr: f32, asleep: bool) {
    for m in range {
        s.steps[m] = steps;
        s.heart_rate[m] = hr;
        s.sleep[m] = asleep;
    }
}

/// One night of 420 asleep minutes inside 450 in bed, three stepping streaks
/// of 10, 20 and 30 minutes, and resting heart rate at 62 or 70.
pub fn fixture_day() -> ParticipantSeries {
    let mut s = present_day();
    fill(&mut s, 0..35, 0.0, 62.0, false);
    fill(&mut s, 35..45, 10.0, 80.0, false);
    fill(&mut s, 45..60, 0.0, 62.0, false);
    fill(&mut s, 60..480, 0.0, 55.0, true);
    fill(&mut s, 480..495, 0.0, 62.0, false);
    fill(&mut s, 495..515, 120.0, 100.0, false);
    fill(&mut s, 515..700, 0.0, 62.0, false);
    fill(&mut s, 700..730, 70.0, 90.0, false);
    fill(&mut s, 730..1000, 0.0, 62.0, false);
    fill(&mut s, 1000..1440, 0.0, 70.0, false);
    s
}

