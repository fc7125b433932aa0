//! Minute-level participant streams, daily labels, prediction windows and
//! temporal splits.
//!
//! Missing sensor values are stored as zero with a per-minute flag set. Days
//! without any record are therefore all zeros with every flag raised.

mod io;
mod split;
mod window;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, load_labels, load_sensors, write_dataset, DatasetWriter, FileFormat};
pub use split::{
    materialize, plan_split, select_finetune_cohort, temporal_split, window_for_key, ExampleKey, SplitPlan, SplitSpec,
    SplitWindows,
};
pub use window::{extract_window, Normalization, Window, WindowSpec, CHANNELS};

pub const MINUTES_PER_DAY: usize = 1440;

/// Per-minute sensor streams for one participant.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticipantSeries {
    pub participant_id: String,
    pub start_day: NaiveDate,
    pub n_days: usize,
    pub steps: Vec<f32>,
    pub heart_rate: Vec<f32>,
    pub sleep: Vec<bool>,
    pub missing_steps: Vec<bool>,
    pub missing_hr: Vec<bool>,
    pub missing_sleep: Vec<bool>,
}

impl ParticipantSeries {
    /// A series with every minute missing.
    pub fn empty(participant_id: impl Into<String>, start_day: NaiveDate, n_days: usize) -> Self {
        let n = n_days * MINUTES_PER_DAY;
        Self {
            participant_id: participant_id.into(),
            start_day,
            n_days,
            steps: vec![0.0; n],
            heart_rate: vec![0.0; n],
            sleep: vec![false; n],
            missing_steps: vec![true; n],
            missing_hr: vec![true; n],
            missing_sleep: vec![true; n],
        }
    }

    pub fn n_minutes(&self) -> usize {
        self.n_days * MINUTES_PER_DAY
    }

    pub fn day_of(&self, date: NaiveDate) -> Option<usize> {
        let offset = (date - self.start_day).num_days();
        (0..self.n_days as i64).contains(&offset).then_some(offset as usize)
    }

    pub fn date_of(&self, day: usize) -> NaiveDate {
        self.start_day + Duration::days(day as i64)
    }

    pub fn day_minutes(day: usize) -> std::ops::Range<usize> {
        day * MINUTES_PER_DAY..(day + 1) * MINUTES_PER_DAY
    }

    /// True when no stream has a single recorded minute on `day`.
    pub fn is_day_absent(&self, day: usize) -> bool {
        let r = Self::day_minutes(day);
        self.missing_steps[r.clone()].iter().all(|&m| m)
            && self.missing_hr[r.clone()].iter().all(|&m| m)
            && self.missing_sleep[r].iter().all(|&m| m)
    }

    pub fn present_days(&self) -> usize {
        (0..self.n_days).filter(|&d| !self.is_day_absent(d)).count()
    }

    /// Checks length, value-range and zero-fill invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_minutes();
        if self.n_days == 0 {
            return Err(Error::Validation(format!("{}: n_days must be >= 1", self.participant_id)));
        }
        let lens = [
            self.steps.len(),
            self.heart_rate.len(),
            self.sleep.len(),
            self.missing_steps.len(),
            self.missing_hr.len(),
            self.missing_sleep.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Validation(format!(
                "{}: stream lengths {lens:?} differ from {n}",
                self.participant_id
            )));
        }
        for i in 0..n {
            let (s, h) = (self.steps[i], self.heart_rate[i]);
            if !(s >= 0.0 && s.is_finite()) || !(h >= 0.0 && h.is_finite()) {
                return Err(Error::Validation(format!(
                    "{}: negative or non-finite value at minute {i}",
                    self.participant_id
                )));
            }
            if (self.missing_steps[i] && s != 0.0)
                || (self.missing_hr[i] && h != 0.0)
                || (self.missing_sleep[i] && self.sleep[i])
            {
                return Err(Error::Validation(format!(
                    "{}: missing minute {i} carries a non-zero value",
                    self.participant_id
                )));
            }
        }
        Ok(())
    }
}

/// Survey answers for one participant-day. `None` means not reported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayLabel {
    pub flu_symptoms: Option<bool>,
    pub kit_trigger: Option<bool>,
    pub flu_positive: Option<bool>,
    pub fatigue: Option<bool>,
}

impl DayLabel {
    pub fn is_empty(&self) -> bool {
        *self == DayLabel::default()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.kit_trigger == Some(true) && self.flu_symptoms != Some(true) {
            return Err("kit_trigger=1 requires flu_symptoms=1".into());
        }
        if self.flu_positive.is_some() && self.kit_trigger != Some(true) {
            return Err("flu_positive is only recorded on kit_trigger days".into());
        }
        Ok(())
    }
}

/// Day-indexed labels aligned with a [`ParticipantSeries`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DailyLabels {
    pub days: Vec<DayLabel>,
}

impl DailyLabels {
    pub fn empty(n_days: usize) -> Self {
        Self {
            days: vec![DayLabel::default(); n_days],
        }
    }

    pub fn get(&self, day: usize) -> Option<&DayLabel> {
        self.days.get(day)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Participant {
    pub series: ParticipantSeries,
    pub labels: DailyLabels,
}

/// A cohort sharing one study calendar.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub start_day: NaiveDate,
    pub n_days: usize,
    pub participants: Vec<Participant>,
}

impl Dataset {
    pub fn new(start_day: NaiveDate, n_days: usize, participants: Vec<Participant>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, p) in participants.iter().enumerate() {
            if p.series.start_day != start_day || p.series.n_days != n_days || p.labels.days.len() != n_days {
                return Err(Error::Validation(format!(
                    "participant {} does not span the study calendar",
                    p.series.participant_id
                )));
            }
            if seen.insert(p.series.participant_id.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate participant {}",
                    p.series.participant_id
                )));
            }
        }
        Ok(Self {
            start_day,
            n_days,
            participants,
        })
    }

    pub fn date_of(&self, day: usize) -> NaiveDate {
        self.start_day + Duration::days(day as i64)
    }

    pub fn day_of(&self, date: NaiveDate) -> Option<usize> {
        let offset = (date - self.start_day).num_days();
        (0..self.n_days as i64).contains(&offset).then_some(offset as usize)
    }

    pub fn index_of(&self, participant_id: &str) -> Option<usize> {
        self.participants
            .iter()
            .position(|p| p.series.participant_id == participant_id)
    }

    pub fn user_days(&self) -> usize {
        self.participants.len() * self.n_days
    }

    pub fn present_user_days(&self) -> usize {
        self.participants.iter().map(|p| p.series.present_days()).sum()
    }

    /// Number of labeled days and positives for `task`.
    pub fn label_counts(&self, task: Task) -> (usize, usize) {
        let mut labeled = 0;
        let mut positive = 0;
        for p in &self.participants {
            for d in &p.labels.days {
                if let Some(y) = task.label(d) {
                    labeled += 1;
                    positive += y as usize;
                }
            }
        }
        (labeled, positive)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.participants {
            p.series.validate()?;
            for (day, l) in p.labels.days.iter().enumerate() {
                l.validate().map_err(|m| {
                    Error::Validation(format!(
                        "{} on {}: {m}",
                        p.series.participant_id,
                        self.date_of(day)
                    ))
                })?;
            }
        }
        Ok(())
    }
}

/// Binary prediction targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    FluPositivity,
    KitTrigger,
    FluSymptoms,
    Fatigue,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::FluPositivity, Task::KitTrigger, Task::FluSymptoms, Task::Fatigue];

    /// Ground truth for a day, `None` when the day cannot be scored.
    ///
    /// Flu positivity is positive only on lab-positive swab days; every other
    /// day with a survey answer is negative.
    pub fn label(self, day: &DayLabel) -> Option<bool> {
        match self {
            Task::FluSymptoms => day.flu_symptoms,
            Task::KitTrigger => day.kit_trigger,
            Task::Fatigue => day.fatigue,
            Task::FluPositivity => day
                .flu_symptoms
                .map(|_| day.kit_trigger == Some(true) && day.flu_positive == Some(true)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::FluPositivity => "flu_positivity",
            Task::KitTrigger => "kit_trigger",
            Task::FluSymptoms => "flu_symptoms",
            Task::Fatigue => "fatigue",
        }
    }

    /// Row title used in comparison tables.
    pub fn title(self) -> &'static str {
        match self {
            Task::FluPositivity => "Flu Positivity",
            Task::KitTrigger => "Kit Trigger",
            Task::FluSymptoms => "Flu Symptoms",
            Task::Fatigue => "Fatigue",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}
