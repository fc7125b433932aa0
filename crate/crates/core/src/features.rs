//! Handcrafted per-day features for the tree baselines.
//!
//! Operational definitions:
//!
//! * resting minute: heart rate, steps and sleep recorded, zero steps, awake
//! * activity buckets by steps per minute: 0, 1-59, 60-99, 100 and above
//! * sleep block: maximal run of recorded sleep minutes; the main block is the
//!   longest (earliest on ties) and every other block is a nap
//! * in bed: a sleep block padded on both sides by at most
//!   [`IN_BED_PAD_LIMIT`] adjacent awake minutes with at most
//!   [`IN_BED_MAX_STEPS`] recorded steps
//! * steps streak: maximal run of minutes with at least one recorded step
//! * percentiles interpolate linearly between order statistics
//! * calories: a fixed surrogate since no sensor measures them, with
//!   [`BMR_PER_MINUTE`] for every minute carrying any data and
//!   [`CALORIES_PER_STEP`] per step
//!
//! A feature whose inputs are entirely missing is zero.

use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ExampleKey, ParticipantSeries, SplitPlan, MINUTES_PER_DAY};
use crate::error::Result;

pub const STANDARD_FEATURES: [&str; 17] = [
    "resting_hr",
    "main_minutes_in_bed",
    "sleep_efficiency",
    "nap_count",
    "total_asleep_minutes",
    "total_in_bed_minutes",
    "active_calories",
    "calories_out",
    "base_metabolic_rate",
    "sedentary_minutes",
    "lightly_active_minutes",
    "fairly_active_minutes",
    "very_active_minutes",
    "missing_hr_flag",
    "missing_sleep_flag",
    "missing_steps_flag",
    "missing_day_flag",
];

pub const EXPERT_FEATURES: [&str; 6] = [
    "resting_hr_p95",
    "resting_hr_p50",
    "resting_hr_std",
    "awake_hr_p95",
    "steps_streak_p95",
    "steps_streak_p50",
];

pub const N_STANDARD: usize = STANDARD_FEATURES.len();
pub const N_DAY_FEATURES: usize = N_STANDARD + EXPERT_FEATURES.len();

pub const IN_BED_MAX_STEPS: f32 = 5.0;
pub const IN_BED_PAD_LIMIT: usize = 30;
pub const BMR_PER_MINUTE: f64 = 1.1;
pub const CALORIES_PER_STEP: f64 = 0.04;

/// Linear-interpolation percentile of ascending `sorted` values, `q` in [0, 1].
/// Zero for an empty slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// All 23 features of one participant-day, standard first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayFeatures {
    pub resting_hr: f64,
    pub main_minutes_in_bed: f64,
    pub sleep_efficiency: f64,
    pub nap_count: f64,
    pub total_asleep_minutes: f64,
    pub total_in_bed_minutes: f64,
    pub active_calories: f64,
    pub calories_out: f64,
    pub base_metabolic_rate: f64,
    pub sedentary_minutes: f64,
    pub lightly_active_minutes: f64,
    pub fairly_active_minutes: f64,
    pub very_active_minutes: f64,
    pub missing_hr_flag: f64,
    pub missing_sleep_flag: f64,
    pub missing_steps_flag: f64,
    pub missing_day_flag: f64,
    pub resting_hr_p95: f64,
    pub resting_hr_p50: f64,
    pub resting_hr_std: f64,
    pub awake_hr_p95: f64,
    pub steps_streak_p95: f64,
    pub steps_streak_p50: f64,
}

impl DayFeatures {
    pub fn to_array(&self) -> [f64; N_DAY_FEATURES] {
        [
            self.resting_hr,
            self.main_minutes_in_bed,
            self.sleep_efficiency,
            self.nap_count,
            self.total_asleep_minutes,
            self.total_in_bed_minutes,
            self.active_calories,
            self.calories_out,
            self.base_metabolic_rate,
            self.sedentary_minutes,
            self.lightly_active_minutes,
            self.fairly_active_minutes,
            self.very_active_minutes,
            self.missing_hr_flag,
            self.missing_sleep_flag,
            self.missing_steps_flag,
            self.missing_day_flag,
            self.resting_hr_p95,
            self.resting_hr_p50,
            self.resting_hr_std,
            self.awake_hr_p95,
            self.steps_streak_p95,
            self.steps_streak_p50,
        ]
    }

    pub fn standard(&self) -> [f64; N_STANDARD] {
        let a = self.to_array();
        let mut out = [0.0; N_STANDARD];
        out.copy_from_slice(&a[..N_STANDARD]);
        out
    }

    pub fn expert(&self) -> [f64; 6] {
        let a = self.to_array();
        let mut out = [0.0; 6];
        out.copy_from_slice(&a[N_STANDARD..]);
        out
    }
}

fn resting_minute(s: &ParticipantSeries, m: usize) -> bool {
    !s.missing_hr[m] && !s.missing_steps[m] && !s.missing_sleep[m] && s.steps[m] == 0.0 && !s.sleep[m]
}

fn runs(flags: impl Iterator<Item = bool>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    let mut i = 0;
    for f in flags {
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
        i += 1;
    }
    if let Some(s) = start {
        out.push((s, i));
    }
    out
}

/// Computes every feature of `day`.
pub fn compute_day_features(s: &ParticipantSeries, day: usize) -> DayFeatures {
    let r = ParticipantSeries::day_minutes(day);
    let base = r.start;
    let all = |mask: &[bool]| mask[r.clone()].iter().all(|&m| m);
    let steps_missing = all(&s.missing_steps);
    let hr_missing = all(&s.missing_hr);
    let sleep_stream_missing = all(&s.missing_sleep);
    let day_missing = steps_missing && hr_missing && sleep_stream_missing;

    // heart rate
    let resting: Vec<f64> = r
        .clone()
        .filter(|&m| resting_minute(s, m))
        .map(|m| s.heart_rate[m] as f64)
        .collect();
    let resting_hr = if resting.is_empty() {
        0.0
    } else {
        resting.iter().sum::<f64>() / resting.len() as f64
    };
    let resting_std = population_std(&resting);
    let resting = sorted(resting);
    let awake = sorted(
        r.clone()
            .filter(|&m| !s.missing_hr[m] && !(s.sleep[m] && !s.missing_sleep[m]))
            .map(|m| s.heart_rate[m] as f64)
            .collect(),
    );

    // sleep
    let asleep = |m: usize| !s.missing_sleep[m] && s.sleep[m];
    let blocks = runs(r.clone().map(asleep));
    let still = |m: usize| !asleep(m) && !s.missing_steps[m] && s.steps[m] <= IN_BED_MAX_STEPS;
    let mut in_bed = vec![false; MINUTES_PER_DAY];
    let mut main: Option<(usize, usize)> = None;
    let mut spans = Vec::with_capacity(blocks.len());
    for &(a, b) in &blocks {
        let mut lo = a;
        while lo > 0 && a - lo < IN_BED_PAD_LIMIT && still(base + lo - 1) {
            lo -= 1;
        }
        let mut hi = b;
        while hi < MINUTES_PER_DAY && hi - b < IN_BED_PAD_LIMIT && still(base + hi) {
            hi += 1;
        }
        in_bed[lo..hi].iter_mut().for_each(|v| *v = true);
        spans.push((lo, hi));
        if main.is_none_or(|(ma, mb)| b - a > mb - ma) {
            main = Some((a, b));
        }
    }
    let total_asleep: usize = blocks.iter().map(|(a, b)| b - a).sum();
    let total_in_bed = in_bed.iter().filter(|&&v| v).count();
    let main_in_bed = main
        .map(|(a, _)| {
            let (lo, hi) = spans[blocks.iter().position(|&(x, _)| x == a).unwrap()];
            // padding of a neighbouring block may join this one
            let mut lo2 = lo;
            while lo2 > 0 && in_bed[lo2 - 1] {
                lo2 -= 1;
            }
            let mut hi2 = hi;
            while hi2 < MINUTES_PER_DAY && in_bed[hi2] {
                hi2 += 1;
            }
            hi2 - lo2
        })
        .unwrap_or(0);
    let no_sleep = blocks.is_empty();

    // activity
    let mut buckets = [0usize; 4];
    let mut total_steps = 0.0;
    let mut with_data = 0usize;
    for m in r.clone() {
        if !s.missing_steps[m] || !s.missing_hr[m] || !s.missing_sleep[m] {
            with_data += 1;
        }
        if s.missing_steps[m] {
            continue;
        }
        let x = s.steps[m];
        total_steps += x as f64;
        let b = match x {
            x if x <= 0.0 => 0,
            x if x < 60.0 => 1,
            x if x < 100.0 => 2,
            _ => 3,
        };
        buckets[b] += 1;
    }
    let streaks = sorted(
        runs(r.clone().map(|m| !s.missing_steps[m] && s.steps[m] >= 1.0))
            .into_iter()
            .map(|(a, b)| (b - a) as f64)
            .collect(),
    );

    let bmr = BMR_PER_MINUTE * with_data as f64;
    let active = CALORIES_PER_STEP * total_steps;
    let flag = |b: bool| b as u8 as f64;

    DayFeatures {
        resting_hr,
        main_minutes_in_bed: main_in_bed as f64,
        sleep_efficiency: if total_in_bed > 0 {
            total_asleep as f64 / total_in_bed as f64
        } else {
            0.0
        },
        nap_count: blocks.len().saturating_sub(1) as f64,
        total_asleep_minutes: total_asleep as f64,
        total_in_bed_minutes: total_in_bed as f64,
        active_calories: active,
        calories_out: bmr + active,
        base_metabolic_rate: bmr,
        sedentary_minutes: buckets[0] as f64,
        lightly_active_minutes: buckets[1] as f64,
        fairly_active_minutes: buckets[2] as f64,
        very_active_minutes: buckets[3] as f64,
        missing_hr_flag: flag(hr_missing),
        missing_sleep_flag: flag(sleep_stream_missing || no_sleep),
        missing_steps_flag: flag(steps_missing),
        missing_day_flag: flag(day_missing),
        resting_hr_p95: percentile(&resting, 0.95),
        resting_hr_p50: percentile(&resting, 0.5),
        resting_hr_std: resting_std,
        awake_hr_p95: percentile(&awake, 0.95),
        steps_streak_p95: percentile(&streaks, 0.95),
        steps_streak_p50: percentile(&streaks, 0.5),
    }
}

/// The 17 standard features of `day`, ordered as [`STANDARD_FEATURES`].
pub fn compute_standard_features(s: &ParticipantSeries, day: usize) -> [f64; N_STANDARD] {
    compute_day_features(s, day).standard()
}

/// The 6 expert features of `day`, ordered as [`EXPERT_FEATURES`].
pub fn compute_expert_features(s: &ParticipantSeries, day: usize) -> [f64; 6] {
    compute_day_features(s, day).expert()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    Standard,
    Expert,
}

impl FeatureSet {
    pub fn per_day(self) -> usize {
        match self {
            FeatureSet::Standard => N_STANDARD,
            FeatureSet::Expert => N_DAY_FEATURES,
        }
    }

    /// Column names of a window vector, oldest day first.
    pub fn column_names(self, lookback_days: usize) -> Vec<String> {
        let names = STANDARD_FEATURES.iter().chain(EXPERT_FEATURES.iter()).take(self.per_day());
        let names: Vec<&str> = names.copied().collect();
        (0..lookback_days)
            .rev()
            .flat_map(|lag| names.iter().map(move |n| format!("{n}_lag{}", lag + 1)))
            .collect()
    }
}

/// Concatenated daily features of the lookback days before a target day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    pub key: ExampleKey,
    pub participant_id: String,
    pub target_day: NaiveDate,
    /// First day covered by the values.
    pub first_day: NaiveDate,
    /// `lookback × 23` values, oldest day first, standard features leading
    /// each day block.
    pub values: Vec<f64>,
}

impl FeatureWindow {
    pub fn label(&self) -> bool {
        self.key.label
    }

    /// Model input for `set`: 17 or 23 values per day.
    pub fn vector(&self, set: FeatureSet) -> Vec<f64> {
        match set {
            FeatureSet::Expert => self.values.clone(),
            FeatureSet::Standard => self
                .values
                .chunks(N_DAY_FEATURES)
                .flat_map(|d| d[..N_STANDARD].iter().copied())
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeatureSplit {
    pub train: Vec<FeatureWindow>,
    pub tuning: Vec<FeatureWindow>,
    pub test: Vec<FeatureWindow>,
}

/// Feature windows for `keys`; day features are computed once per
/// participant-day that some window needs.
pub fn feature_windows(dataset: &Dataset, keys: &[ExampleKey], lookback_days: usize) -> Vec<FeatureWindow> {
    let mut cache: std::collections::HashMap<(usize, usize), [f64; N_DAY_FEATURES]> = Default::default();
    keys.iter()
        .map(|k| {
            let p = &dataset.participants[k.participant];
            let mut values = Vec::with_capacity(lookback_days * N_DAY_FEATURES);
            for day in k.day - lookback_days..k.day {
                let f = cache
                    .entry((k.participant, day))
                    .or_insert_with(|| compute_day_features(&p.series, day).to_array());
                values.extend_from_slice(f);
            }
            FeatureWindow {
                key: *k,
                participant_id: p.series.participant_id.clone(),
                target_day: dataset.date_of(k.day),
                first_day: dataset.date_of(k.day - lookback_days),
                values,
            }
        })
        .collect()
}

/// Feature windows for every side of `plan`, in plan order.
pub fn build_feature_windows(dataset: &Dataset, plan: &SplitPlan) -> FeatureSplit {
    FeatureSplit {
        train: feature_windows(dataset, &plan.train, plan.lookback_days),
        tuning: feature_windows(dataset, &plan.tuning, plan.lookback_days),
        test: feature_windows(dataset, &plan.test, plan.lookback_days),
    }
}

/// Writes one row per participant-day with all 23 features.
pub fn write_day_features_csv(dataset: &Dataset, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["participant_id", "date"];
    header.extend(STANDARD_FEATURES);
    header.extend(EXPERT_FEATURES);
    w.write_record(&header)?;
    for p in &dataset.participants {
        for day in 0..dataset.n_days {
            let f = compute_day_features(&p.series, day).to_array();
            let mut row = vec![p.series.participant_id.clone(), dataset.date_of(day).to_string()];
            row.extend(f.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes one row per feature window: identifiers, label, then the vector.
pub fn write_feature_windows_csv(
    windows: &[FeatureWindow],
    set: FeatureSet,
    lookback_days: usize,
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["participant_id".to_string(), "target_day".into(), "label".into()];
    header.extend(set.column_names(lookback_days));
    w.write_record(&header)?;
    for fw in windows {
        let mut row = vec![
            fw.participant_id.clone(),
            fw.target_day.to_string(),
            (fw.key.label as u8).to_string(),
        ];
        row.extend(fw.vector(set).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
