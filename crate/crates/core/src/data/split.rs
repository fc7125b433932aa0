use std::collections::BTreeSet;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::window::window_channels;
use super::{Dataset, Task, Window, WindowSpec};
use crate::error::{Error, Result};

/// Calendar boundary between the training and test periods.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub boundary_day: NaiveDate,
    /// Fraction of test-period users held out for tuning.
    pub tuning_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// Boundary at the study midpoint with a 10% tuning subset.
    pub fn midpoint(dataset: &Dataset, seed: u64) -> Self {
        Self {
            boundary_day: dataset.date_of(dataset.n_days / 2),
            tuning_fraction: 0.1,
            seed,
        }
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<usize> {
        if !(0.0..1.0).contains(&self.tuning_fraction) {
            return Err(Error::Config(format!(
                "tuning_fraction must lie in [0, 1), got {}",
                self.tuning_fraction
            )));
        }
        match dataset.day_of(self.boundary_day) {
            Some(b) if b > 0 => Ok(b),
            _ => Err(Error::Config(format!(
                "split boundary {} is not strictly inside the study period {}..{}",
                self.boundary_day,
                dataset.start_day,
                dataset.date_of(dataset.n_days - 1)
            ))),
        }
    }
}

/// A labeled participant-day, by index into a [`Dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExampleKey {
    pub participant: usize,
    pub day: usize,
    pub label: bool,
}

/// Example membership of every side of a temporal split.
///
/// Train examples have target days before the boundary. Test-period examples
/// have all of their window on or after the boundary; their users are divided
/// into a tuning subset and the test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub task: Task,
    pub boundary: usize,
    pub lookback_days: usize,
    pub train: Vec<ExampleKey>,
    pub tuning: Vec<ExampleKey>,
    pub test: Vec<ExampleKey>,
    pub tuning_users: Vec<usize>,
    pub test_users: Vec<usize>,
}

impl SplitPlan {
    /// Test-period examples of the given users, in plan order.
    pub fn test_examples_of(&self, users: &[usize]) -> Vec<ExampleKey> {
        let set: BTreeSet<usize> = users.iter().copied().collect();
        self.test.iter().filter(|k| set.contains(&k.participant)).copied().collect()
    }

    /// Train-period examples restricted to (or excluding) a user set.
    pub fn train_examples_filtered(&self, users: &[usize], keep: bool) -> Vec<ExampleKey> {
        let set: BTreeSet<usize> = users.iter().copied().collect();
        self.train
            .iter()
            .filter(|k| set.contains(&k.participant) == keep)
            .copied()
            .collect()
    }
}

/// Decides which participant-days land on which side of the split.
pub fn plan_split(dataset: &Dataset, spec: &SplitSpec, task: Task, lookback_days: usize) -> Result<SplitPlan> {
    let boundary = spec.validate(dataset)?;
    let mut train = Vec::new();
    let mut test_period = Vec::new();
    for (pi, p) in dataset.participants.iter().enumerate() {
        for (day, l) in p.labels.days.iter().enumerate() {
            let Some(label) = task.label(l) else { continue };
            let key = ExampleKey {
                participant: pi,
                day,
                label,
            };
            if day >= lookback_days && day < boundary {
                train.push(key);
            } else if day >= boundary + lookback_days {
                test_period.push(key);
            }
        }
    }
    if train.is_empty() {
        return Err(Error::Config(format!("split leaves no {task} training examples")));
    }
    if test_period.is_empty() {
        return Err(Error::Config(format!("split leaves no {task} test-period examples")));
    }

    let users: BTreeSet<usize> = test_period.iter().map(|k| k.participant).collect();
    let mut users: Vec<usize> = users.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    users.shuffle(&mut rng);
    let n_tuning = (spec.tuning_fraction * users.len() as f64).round() as usize;
    let mut tuning_users = users[..n_tuning].to_vec();
    let mut test_users = users[n_tuning..].to_vec();
    tuning_users.sort_unstable();
    test_users.sort_unstable();
    if test_users.is_empty() {
        return Err(Error::Config("tuning subset leaves no test users".into()));
    }
    let tuning_set: BTreeSet<usize> = tuning_users.iter().copied().collect();
    let (tuning, test): (Vec<_>, Vec<_>) = test_period
        .into_iter()
        .partition(|k| tuning_set.contains(&k.participant));

    Ok(SplitPlan {
        task,
        boundary,
        lookback_days,
        train,
        tuning,
        test,
        tuning_users,
        test_users,
    })
}

/// Windows of each side of a split.
#[derive(Clone, Debug)]
pub struct SplitWindows {
    pub train: Vec<Window>,
    pub tuning: Vec<Window>,
    pub test: Vec<Window>,
}

/// Builds the windows of `keys`.
pub fn materialize(dataset: &Dataset, keys: &[ExampleKey], spec: WindowSpec) -> Vec<Window> {
    keys.iter().map(|k| window_for_key(dataset, k, spec)).collect()
}

/// Window of one planned example.
pub fn window_for_key(dataset: &Dataset, key: &ExampleKey, spec: WindowSpec) -> Window {
    let p = &dataset.participants[key.participant];
    let first = key.day - spec.lookback_days;
    Window {
        participant_id: p.series.participant_id.clone(),
        target_day: dataset.date_of(key.day),
        first_day: dataset.date_of(first),
        label: Some(key.label),
        channels: window_channels(&p.series, first, spec),
    }
}

/// Temporal split materialized as windows.
pub fn temporal_split(dataset: &Dataset, spec: &SplitSpec, task: Task, window: WindowSpec) -> Result<SplitWindows> {
    window.validate()?;
    let plan = plan_split(dataset, spec, task, window.lookback_days)?;
    Ok(SplitWindows {
        train: materialize(dataset, &plan.train, window),
        tuning: materialize(dataset, &plan.tuning, window),
        test: materialize(dataset, &plan.test, window),
    })
}

/// Draws `k` users uniformly without replacement; returns `(cohort, rest)`,
/// both sorted.
pub fn select_finetune_cohort<T: Clone + Ord>(users: &[T], k: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if k >= users.len() {
        return Err(Error::Config(format!(
            "cannot select {k} finetuning users from a population of {}",
            users.len()
        )));
    }
    let mut pool = users.to_vec();
    pool.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut cohort = pool[..k].to_vec();
    let mut rest = pool[k..].to_vec();
    cohort.sort();
    rest.sort();
    Ok((cohort, rest))
}
