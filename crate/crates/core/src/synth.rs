//! Synthetic cohorts with planted illness signal.
//!
//! Every distributional choice here is invented: a circadian baseline (one
//! night-time sleep block with still minutes around it, walking bouts during
//! the day, resting heart rate with a personal offset and Gaussian noise),
//! Poisson step counts, device-off gaps and fully dropped days. Illness
//! episodes raise heart rate, suppress steps and lengthen sleep by known
//! amounts so that models can be checked against ground truth.
//!
//! With `long_range_mode`, each day may also carry an isolated heart-rate
//! marker or a sleep marker, and the symptom label of day `d` is additionally
//! positive when day `d-4` carries the heart-rate marker and day `d-1` the
//! sleep marker. Recognising this requires relating two non-adjacent days of
//! the window in the right order.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{DailyLabels, DayLabel, Dataset, Participant, ParticipantSeries, MINUTES_PER_DAY};
use crate::error::{Error, Result};

/// Magnitudes of the physiological changes during an episode at severity 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EffectSizes {
    pub resting_hr_delta_bpm: f64,
    pub step_suppression_ratio: f64,
    pub extra_sleep_minutes: f64,
}

impl Default for EffectSizes {
    fn default() -> Self {
        Self {
            resting_hr_delta_bpm: 6.0,
            step_suppression_ratio: 0.3,
            extra_sleep_minutes: 45.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_participants: usize,
    pub n_days: usize,
    pub start_day: NaiveDate,
    /// Expected fraction of days with reported symptoms from illness episodes.
    pub symptom_prevalence: f64,
    /// Probability that an episode leads to a kit trigger.
    pub trigger_probability: f64,
    pub positive_given_trigger: f64,
    pub effect_sizes: EffectSizes,
    /// Episode severity is drawn uniformly from this range.
    pub severity_range: (f64, f64),
    /// Episode durations in days, inclusive range.
    pub episode_days: (usize, usize),
    /// Episodes below this severity produce no symptom reports.
    pub symptom_threshold: f64,
    pub missing_minute_rate: f64,
    pub missing_day_rate: f64,
    /// Probability of answering the daily survey.
    pub survey_response_rate: f64,
    /// Fatigue reported on days without symptoms.
    pub fatigue_false_positive_rate: f64,
    pub long_range_mode: bool,
    /// Daily probability of each marker in long-range mode.
    pub long_range_marker_rate: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_participants: 100,
            n_days: 120,
            start_day: NaiveDate::from_ymd_opt(2020, 1, 6).unwrap(),
            symptom_prevalence: 0.05,
            trigger_probability: 0.17,
            positive_given_trigger: 0.3,
            effect_sizes: EffectSizes::default(),
            severity_range: (0.5, 1.0),
            episode_days: (3, 7),
            symptom_threshold: 0.3,
            missing_minute_rate: 0.02,
            missing_day_rate: 0.05,
            survey_response_rate: 0.95,
            fatigue_false_positive_rate: 0.05,
            long_range_mode: false,
            long_range_marker_rate: 0.25,
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("symptom_prevalence", self.symptom_prevalence),
            ("trigger_probability", self.trigger_probability),
            ("positive_given_trigger", self.positive_given_trigger),
            ("step_suppression_ratio", self.effect_sizes.step_suppression_ratio),
            ("missing_minute_rate", self.missing_minute_rate),
            ("missing_day_rate", self.missing_day_rate),
            ("survey_response_rate", self.survey_response_rate),
            ("fatigue_false_positive_rate", self.fatigue_false_positive_rate),
            ("long_range_marker_rate", self.long_range_marker_rate),
            ("symptom_threshold", self.symptom_threshold),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.n_participants == 0 || self.n_days == 0 {
            return Err(Error::Config("n_participants and n_days must be >= 1".into()));
        }
        let (lo, hi) = self.severity_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("invalid severity range {lo}..{hi}")));
        }
        let (dmin, dmax) = self.episode_days;
        if dmin < 2 || dmin > dmax {
            return Err(Error::Config(format!("invalid episode duration range {dmin}..{dmax}")));
        }
        if self.symptom_prevalence >= 0.9 {
            return Err(Error::Config("symptom_prevalence must be below 0.9".into()));
        }
        if self.effect_sizes.extra_sleep_minutes < 0.0 || self.effect_sizes.extra_sleep_minutes > 300.0 {
            return Err(Error::Config("extra_sleep_minutes must lie in [0, 300]".into()));
        }
        Ok(())
    }

    /// Daily episode onset probability that yields `symptom_prevalence`.
    ///
    /// Symptoms are reported on every episode day but the first, so an
    /// episode of mean length `D` occupies `D` days and reports `D - 1`.
    /// Onsets are only possible outside episodes, which gives the stationary
    /// fraction `r (D - 1) / (1 + r D)`.
    fn onset_rate(&self) -> f64 {
        let (a, b) = self.episode_days;
        let mean = (a + b) as f64 / 2.0;
        let (lo, hi) = self.severity_range;
        let symptomatic = if hi <= lo {
            (lo >= self.symptom_threshold) as u8 as f64
        } else {
            ((hi - self.symptom_threshold.max(lo)) / (hi - lo)).clamp(0.0, 1.0)
        };
        let p = self.symptom_prevalence / symptomatic.max(1e-12);
        if p <= 0.0 {
            return 0.0;
        }
        (p / (mean - 1.0 - p * mean)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IllnessEpisode {
    pub participant: usize,
    pub onset_day: usize,
    pub duration_days: usize,
    pub severity: f64,
}

impl IllnessEpisode {
    pub fn contains(&self, day: usize) -> bool {
        (self.onset_day..self.onset_day + self.duration_days).contains(&day)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerKind {
    HeartRate,
    Sleep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongRangeMarker {
    pub participant: usize,
    pub day: usize,
    pub kind: MarkerKind,
}

/// What the generator planted, for test harnesses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub participant_ids: Vec<String>,
    pub episodes: Vec<IllnessEpisode>,
    pub markers: Vec<LongRangeMarker>,
}

#[derive(Clone, Debug)]
pub struct GeneratedParticipant {
    pub participant: Participant,
    pub episodes: Vec<IllnessEpisode>,
    pub markers: Vec<LongRangeMarker>,
}

#[derive(Clone, Debug)]
pub struct GeneratedCohort {
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of participant `index`; independent of how many participants exist.
pub fn participant_seed(master: u64, index: usize) -> u64 {
    splitmix64(splitmix64(master) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn participant_id(index: usize) -> String {
    format!("P{index:04}")
}

/// Per-participant generator; `participant(i)` is a pure function of the
/// configuration and `i`.
pub struct CohortGenerator {
    config: CohortConfig,
    onset_rate: f64,
}

impl CohortGenerator {
    pub fn new(config: CohortConfig) -> Result<Self> {
        config.validate()?;
        let onset_rate = config.onset_rate();
        Ok(Self { config, onset_rate })
    }

    pub fn config(&self) -> &CohortConfig {
        &self.config
    }

    pub fn participant(&self, index: usize) -> GeneratedParticipant {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(participant_seed(cfg.seed, index));
        let n_days = cfg.n_days;

        // personal baseline
        let rhr = Normal::new(64.0f64, 7.0).unwrap().sample(&mut rng).clamp(45.0, 90.0);
        let wake = Normal::new(420.0f64, 40.0).unwrap().sample(&mut rng).clamp(300.0, 560.0);
        let sleep_len = Normal::new(450.0f64, 30.0).unwrap().sample(&mut rng).clamp(360.0, 540.0);
        let activity = (Normal::new(0.0f64, 0.3).unwrap().sample(&mut rng)).exp();
        let nap_rate = rng.random_range(0.0..0.15);

        // episodes
        let mut episodes = Vec::new();
        let mut day = 0;
        while day < n_days {
            if self.onset_rate > 0.0 && rng.random_bool(self.onset_rate) {
                let duration = rng.random_range(cfg.episode_days.0..=cfg.episode_days.1);
                let (lo, hi) = cfg.severity_range;
                let severity = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                episodes.push(IllnessEpisode {
                    participant: index,
                    onset_day: day,
                    duration_days: duration.min(n_days - day),
                    severity,
                });
                day += duration;
            } else {
                day += 1;
            }
        }
        let mut severity = vec![0.0; n_days];
        let mut symptomatic = vec![false; n_days];
        for e in &episodes {
            for d in e.onset_day..e.onset_day + e.duration_days {
                severity[d] = e.severity;
                symptomatic[d] = d > e.onset_day && e.severity >= cfg.symptom_threshold;
            }
        }

        let mut hr_marker = vec![false; n_days];
        let mut sleep_marker = vec![false; n_days];
        let mut markers = Vec::new();
        if cfg.long_range_mode {
            for d in 0..n_days {
                hr_marker[d] = rng.random_bool(cfg.long_range_marker_rate);
                sleep_marker[d] = rng.random_bool(cfg.long_range_marker_rate);
                if hr_marker[d] {
                    markers.push(LongRangeMarker {
                        participant: index,
                        day: d,
                        kind: MarkerKind::HeartRate,
                    });
                }
                if sleep_marker[d] {
                    markers.push(LongRangeMarker {
                        participant: index,
                        day: d,
                        kind: MarkerKind::Sleep,
                    });
                }
            }
        }

        let id = participant_id(index);
        let mut series = ParticipantSeries::empty(id, cfg.start_day, n_days);
        for m in 0..series.n_minutes() {
            series.missing_steps[m] = false;
            series.missing_hr[m] = false;
            series.missing_sleep[m] = false;
        }
        let fx = cfg.effect_sizes;
        let hr_noise = Normal::new(0.0f64, 3.0).unwrap();
        let day_noise = Normal::new(0.0f64, 1.5).unwrap();
        let jitter = Normal::new(0.0f64, 20.0).unwrap();
        let total = series.n_minutes() as i64;

        // sleep: the night ending on day d runs until that morning's wake time
        for d in 0..n_days {
            let mut extra = severity[d] * fx.extra_sleep_minutes;
            if sleep_marker[d] {
                extra += fx.extra_sleep_minutes;
            }
            let wake_at = (d * MINUTES_PER_DAY) as i64 + (wake + jitter.sample(&mut rng) + extra).round() as i64;
            let length = (sleep_len + jitter.sample(&mut rng) + extra).round() as i64;
            let onset = wake_at - length;
            let still_before = rng.random_range(5..25);
            let still_after = rng.random_range(3..15);
            mark_sleep(&mut series, onset, wake_at, still_before, still_after, total);
            if rng.random_bool(nap_rate) {
                let nap_start = (d * MINUTES_PER_DAY) as i64 + rng.random_range(780..960);
                let nap_len = rng.random_range(20..70);
                mark_sleep(&mut series, nap_start, nap_start + nap_len, 3, 3, total);
            }
        }

        // activity and heart rate
        let bout_len = Normal::new(12.0f64, 6.0).unwrap();
        for d in 0..n_days {
            let mut hr_offset = rhr + day_noise.sample(&mut rng) + severity[d] * fx.resting_hr_delta_bpm;
            if hr_marker[d] {
                hr_offset += fx.resting_hr_delta_bpm;
            }
            let step_scale = 1.0 - severity[d] * fx.step_suppression_ratio;
            let mut bout_left = 0usize;
            let mut bout_rate = 0.0;
            for m in ParticipantSeries::day_minutes(d) {
                let minute_of_day = m % MINUTES_PER_DAY;
                if series.sleep[m] {
                    series.steps[m] = 0.0;
                    let v = hr_offset - 6.0 + 0.5 * hr_noise.sample(&mut rng);
                    series.heart_rate[m] = v.max(30.0) as f32;
                    bout_left = 0;
                    continue;
                }
                if series.steps[m] < 0.0 {
                    // still minute in bed
                    series.steps[m] = 0.0;
                    series.heart_rate[m] = (hr_offset + hr_noise.sample(&mut rng)).max(30.0) as f32;
                    bout_left = 0;
                    continue;
                }
                let daytime = (480..1320).contains(&minute_of_day);
                if bout_left == 0 {
                    let start_p = if daytime { 0.02 * activity } else { 0.004 };
                    if rng.random_bool(start_p.min(1.0)) {
                        bout_left = bout_len.sample(&mut rng).max(1.0).round() as usize;
                        bout_rate = rng.random_range(60.0..130.0) * activity.sqrt();
                    }
                }
                let raw = if bout_left > 0 {
                    bout_left -= 1;
                    Poisson::new(bout_rate).unwrap().sample(&mut rng)
                } else if rng.random_bool(0.12) {
                    Poisson::new(6.0).unwrap().sample(&mut rng)
                } else {
                    0.0
                };
                let steps = (raw * step_scale).round();
                series.steps[m] = steps as f32;
                let v = hr_offset + steps.min(140.0) * 0.25 + hr_noise.sample(&mut rng);
                series.heart_rate[m] = v.max(30.0) as f32;
            }
        }

        // missingness
        let gap_len = 30.0;
        let gaps_per_day = cfg.missing_minute_rate * MINUTES_PER_DAY as f64 / gap_len;
        for d in 0..n_days {
            if cfg.missing_day_rate > 0.0 && rng.random_bool(cfg.missing_day_rate) {
                blank(&mut series, ParticipantSeries::day_minutes(d));
                continue;
            }
            if gaps_per_day > 0.0 {
                let n_gaps = Poisson::new(gaps_per_day).unwrap().sample(&mut rng) as usize;
                for _ in 0..n_gaps {
                    let start = d * MINUTES_PER_DAY + rng.random_range(0..MINUTES_PER_DAY);
                    let len = rng.random_range(1..(2.0 * gap_len) as usize);
                    let end = (start + len).min((d + 1) * MINUTES_PER_DAY);
                    blank(&mut series, start..end);
                }
            }
        }

        // labels
        let mut labels = DailyLabels::empty(n_days);
        let mut triggered = vec![false; episodes.len()];
        for d in 0..n_days {
            let long_range = cfg.long_range_mode && d >= 4 && hr_marker[d - 4] && sleep_marker[d - 1];
            let symptoms = symptomatic[d] || long_range;
            let answered = rng.random_bool(cfg.survey_response_rate);
            let fatigue_noise = rng.random_bool(cfg.fatigue_false_positive_rate);
            let trigger_roll = rng.random::<f64>();
            let positive_roll = rng.random::<f64>();
            if !answered {
                continue;
            }
            let mut label = DayLabel {
                flu_symptoms: Some(symptoms),
                kit_trigger: Some(false),
                flu_positive: None,
                fatigue: Some(symptoms || severity[d] > 0.0 || fatigue_noise),
            };
            if symptomatic[d] {
                let e = episodes.iter().position(|e| e.contains(d)).expect("symptomatic day inside an episode");
                // one trigger decision per episode, taken on its first answered symptomatic day
                if !triggered[e] {
                    triggered[e] = true;
                    if trigger_roll < cfg.trigger_probability {
                        label.kit_trigger = Some(true);
                        label.flu_positive = Some(positive_roll < cfg.positive_given_trigger);
                    }
                }
            }
            labels.days[d] = label;
        }

        GeneratedParticipant {
            participant: Participant { series, labels },
            episodes,
            markers,
        }
    }

    /// Generates every participant in order.
    pub fn generate(&self) -> Result<GeneratedCohort> {
        let gens: Vec<GeneratedParticipant> = (0..self.config.n_participants).map(|i| self.participant(i)).collect();
        let mut truth = GroundTruth::default();
        let mut participants = Vec::with_capacity(gens.len());
        for g in gens {
            truth.participant_ids.push(g.participant.series.participant_id.clone());
            truth.episodes.extend(g.episodes);
            truth.markers.extend(g.markers);
            participants.push(g.participant);
        }
        let dataset = Dataset::new(self.config.start_day, self.config.n_days, participants)?;
        Ok(GeneratedCohort { dataset, truth })
    }
}

/// Generates a whole cohort in memory.
pub fn generate_cohort(config: &CohortConfig) -> Result<GeneratedCohort> {
    CohortGenerator::new(config.clone())?.generate()
}

/// Marks `[onset, wake)` asleep and the still minutes around it. Still
/// minutes are tagged with a negative step count, resolved by the activity pass.
fn mark_sleep(s: &mut ParticipantSeries, onset: i64, wake: i64, before: i64, after: i64, total: i64) {
    let clip = |m: i64| m.clamp(0, total) as usize;
    for m in clip(onset - before)..clip(onset) {
        if !s.sleep[m] {
            s.steps[m] = -1.0;
        }
    }
    for m in clip(onset)..clip(wake) {
        s.sleep[m] = true;
        s.steps[m] = 0.0;
    }
    for m in clip(wake)..clip(wake + after) {
        if !s.sleep[m] {
            s.steps[m] = -1.0;
        }
    }
}

fn blank(s: &mut ParticipantSeries, range: std::ops::Range<usize>) {
    for m in range {
        s.steps[m] = 0.0;
        s.heart_rate[m] = 0.0;
        s.sleep[m] = false;
        s.missing_steps[m] = true;
        s.missing_hr[m] = true;
        s.missing_sleep[m] = true;
    }
}

/// Measured effect of the planted episodes against what was configured.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub episode_days: usize,
    pub baseline_days: usize,
    pub measured_resting_hr_delta: f64,
    pub expected_resting_hr_delta: f64,
    pub measured_step_ratio: f64,
    pub expected_step_ratio: f64,
    pub measured_extra_sleep_minutes: f64,
    pub expected_extra_sleep_minutes: f64,
}

pub const HR_DELTA_TOLERANCE: f64 = 1.0;
pub const STEP_RATIO_TOLERANCE: f64 = 0.1;
pub const EXTRA_SLEEP_TOLERANCE: f64 = 15.0;

struct DaySummary {
    resting_hr: Option<f64>,
    steps_per_awake_minute: Option<f64>,
    asleep_minutes: f64,
}

fn summarize_day(s: &ParticipantSeries, day: usize) -> DaySummary {
    let (mut hr_sum, mut hr_n) = (0.0, 0usize);
    let (mut steps, mut awake) = (0.0, 0usize);
    let mut asleep = 0.0;
    for m in ParticipantSeries::day_minutes(day) {
        if s.missing_sleep[m] {
            continue;
        }
        if s.sleep[m] {
            asleep += 1.0;
            continue;
        }
        if !s.missing_steps[m] {
            steps += s.steps[m] as f64;
            awake += 1;
            if s.steps[m] == 0.0 && !s.missing_hr[m] {
                hr_sum += s.heart_rate[m] as f64;
                hr_n += 1;
            }
        }
    }
    DaySummary {
        resting_hr: (hr_n > 0).then(|| hr_sum / hr_n as f64),
        steps_per_awake_minute: (awake > 0).then(|| steps / awake as f64),
        asleep_minutes: asleep,
    }
}

/// Compares episode days against each participant's own baseline days.
///
/// Marker days of long-range cohorts are left out of the baseline. Fails with
/// [`Error::SignalMismatch`] when a measurement is outside its tolerance.
pub fn verify_planted_signal(dataset: &Dataset, truth: &GroundTruth, effects: &EffectSizes) -> Result<EffectReport> {
    let mut hr_delta = Vec::new();
    let mut step_ratio = Vec::new();
    let mut extra_sleep = Vec::new();
    let mut expected = (0.0, 0.0, 0.0);
    let mut baseline_days = 0;
    for (pi, p) in dataset.participants.iter().enumerate() {
        let s = &p.series;
        let mut sev = vec![None; s.n_days];
        for e in truth.episodes.iter().filter(|e| e.participant == pi) {
            for d in e.onset_day..(e.onset_day + e.duration_days).min(s.n_days) {
                sev[d] = Some(e.severity);
            }
        }
        let mut excluded = vec![false; s.n_days];
        for m in truth.markers.iter().filter(|m| m.participant == pi) {
            excluded[m.day] = true;
            if m.kind == MarkerKind::Sleep && m.day + 1 < s.n_days {
                excluded[m.day + 1] = true;
            }
        }
        // the night before an episode day shifts sleep onset into the previous day
        for d in 0..s.n_days {
            if d + 1 < s.n_days && sev[d].is_none() && sev[d + 1].is_some() {
                excluded[d] = true;
            }
            if d > 0 && sev[d].is_none() && sev[d - 1].is_some() {
                excluded[d] = true;
            }
        }
        let days: Vec<DaySummary> = (0..s.n_days).map(|d| summarize_day(s, d)).collect();
        let base: Vec<&DaySummary> = (0..s.n_days)
            .filter(|&d| sev[d].is_none() && !excluded[d] && !s.is_day_absent(d))
            .map(|d| &days[d])
            .collect();
        if base.is_empty() {
            continue;
        }
        baseline_days += base.len();
        let mean = |f: &dyn Fn(&DaySummary) -> Option<f64>| {
            let v: Vec<f64> = base.iter().filter_map(|d| f(d)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let base_hr = mean(&|d| d.resting_hr);
        let base_steps = mean(&|d| d.steps_per_awake_minute);
        let base_sleep = mean(&|d| Some(d.asleep_minutes)).unwrap_or(0.0);
        for d in 0..s.n_days {
            let Some(severity) = sev[d] else { continue };
            if s.is_day_absent(d) || excluded[d] {
                continue;
            }
            let day = &days[d];
            if let (Some(h), Some(b)) = (day.resting_hr, base_hr) {
                hr_delta.push(h - b);
                expected.0 += severity * effects.resting_hr_delta_bpm;
            }
            if let (Some(x), Some(b)) = (day.steps_per_awake_minute, base_steps) {
                if b > 0.0 {
                    step_ratio.push(x / b);
                    expected.1 += 1.0 - severity * effects.step_suppression_ratio;
                }
            }
            extra_sleep.push(day.asleep_minutes - base_sleep);
            expected.2 += severity * effects.extra_sleep_minutes;
        }
    }
    let avg = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let report = EffectReport {
        episode_days: extra_sleep.len(),
        baseline_days,
        measured_resting_hr_delta: avg(&hr_delta),
        expected_resting_hr_delta: if hr_delta.is_empty() { 0.0 } else { expected.0 / hr_delta.len() as f64 },
        measured_step_ratio: if step_ratio.is_empty() { 1.0 } else { avg(&step_ratio) },
        expected_step_ratio: if step_ratio.is_empty() { 1.0 } else { expected.1 / step_ratio.len() as f64 },
        measured_extra_sleep_minutes: avg(&extra_sleep),
        expected_extra_sleep_minutes: if extra_sleep.is_empty() { 0.0 } else { expected.2 / extra_sleep.len() as f64 },
    };
    let checks = [
        (
            "resting HR delta",
            report.measured_resting_hr_delta,
            report.expected_resting_hr_delta,
            HR_DELTA_TOLERANCE,
        ),
        (
            "step ratio",
            report.measured_step_ratio,
            report.expected_step_ratio,
            STEP_RATIO_TOLERANCE,
        ),
        (
            "extra sleep",
            report.measured_extra_sleep_minutes,
            report.expected_extra_sleep_minutes,
            EXTRA_SLEEP_TOLERANCE,
        ),
    ];
    for (name, measured, expected, tol) in checks {
        if (measured - expected).abs() > tol {
            return Err(Error::SignalMismatch(format!(
                "{name}: measured {measured:.3}, expected {expected:.3} (tolerance {tol})"
            )));
        }
    }
    Ok(report)
}
