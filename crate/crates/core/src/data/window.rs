use std::borrow::Borrow;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{DailyLabels, ParticipantSeries, Task, MINUTES_PER_DAY};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Channel order of every window.
pub const CHANNELS: [&str; 6] = [
    "steps",
    "heart_rate",
    "sleep",
    "missing_steps",
    "missing_hr",
    "missing_sleep",
];

/// Shape of the input windows.
///
/// `resolution_minutes > 1` averages consecutive minutes into bins: value
/// channels hold the mean over recorded minutes of the bin (0 when none), flag
/// channels hold the fraction of missing minutes. A bin is only flagged 1 when
/// every minute in it is missing, so the zero-fill rule still holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lookback_days: usize,
    pub resolution_minutes: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            lookback_days: 4,
            resolution_minutes: 1,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lookback_days == 0 {
            return Err(Error::Config("lookback_days must be >= 1".into()));
        }
        if self.resolution_minutes == 0 || MINUTES_PER_DAY % self.resolution_minutes != 0 {
            return Err(Error::Config(format!(
                "resolution_minutes must divide {MINUTES_PER_DAY}, got {}",
                self.resolution_minutes
            )));
        }
        Ok(())
    }

    /// Number of time steps per channel.
    pub fn length(&self) -> usize {
        self.lookback_days * MINUTES_PER_DAY / self.resolution_minutes
    }

    pub fn bins_per_day(&self) -> usize {
        MINUTES_PER_DAY / self.resolution_minutes
    }
}

/// Input matrix for one participant-day prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub participant_id: String,
    pub target_day: NaiveDate,
    /// First day covered by the channels.
    pub first_day: NaiveDate,
    pub label: Option<bool>,
    /// `[6, lookback · 1440 / resolution]`, ordered as [`CHANNELS`].
    pub channels: Tensor,
}

/// Builds the window over the `lookback_days` strictly preceding `target_day`.
///
/// Returns `None` when there is not enough history or the target day lies
/// outside the study. The label is taken from `task` and may be absent.
pub fn extract_window(
    series: &ParticipantSeries,
    labels: &DailyLabels,
    target_day: NaiveDate,
    task: Task,
    spec: WindowSpec,
) -> Option<Window> {
    let target = series.day_of(target_day)?;
    if target < spec.lookback_days {
        return None;
    }
    let first = target - spec.lookback_days;
    let label = labels.get(target).and_then(|l| task.label(l));
    Some(Window {
        participant_id: series.participant_id.clone(),
        target_day,
        first_day: series.date_of(first),
        label,
        channels: window_channels(series, first, spec),
    })
}

pub(crate) fn window_channels(series: &ParticipantSeries, first_day: usize, spec: WindowSpec) -> Tensor {
    let len = spec.length();
    let res = spec.resolution_minutes;
    let base = first_day * MINUTES_PER_DAY;
    let mut data = vec![0.0; 6 * len];
    let value_streams: [&dyn Fn(usize) -> f64; 3] = [
        &|m| series.steps[m] as f64,
        &|m| series.heart_rate[m] as f64,
        &|m| series.sleep[m] as u8 as f64,
    ];
    let masks = [&series.missing_steps, &series.missing_hr, &series.missing_sleep];
    for c in 0..3 {
        for bin in 0..len {
            let start = base + bin * res;
            let mut total = 0.0;
            let mut present = 0usize;
            for m in start..start + res {
                if !masks[c][m] {
                    total += value_streams[c](m);
                    present += 1;
                }
            }
            let missing = res - present;
            data[c * len + bin] = if present > 0 { total / present as f64 } else { 0.0 };
            data[(c + 3) * len + bin] = missing as f64 / res as f64;
        }
    }
    Tensor::from_parts(vec![6, len], data)
}

/// Per-channel affine normalization of the three value channels.
///
/// Applied only where a bin has at least one recorded minute, so fully
/// missing bins stay zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: [f64; 3],
    pub scale: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self::identity()
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            shift: [0.0; 3],
            scale: [1.0; 3],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Mean and standard deviation of each value channel over recorded bins.
    pub fn fit<'a>(windows: impl IntoIterator<Item = &'a Window>) -> Self {
        Self::fit_channels(windows.into_iter().map(|w| &w.channels))
    }

    /// As [`Normalization::fit`], over bare `[6, L]` channel matrices.
    pub fn fit_channels<T: Borrow<Tensor>>(channels: impl IntoIterator<Item = T>) -> Self {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut n = [0usize; 3];
        for t in channels {
            let t = t.borrow();
            let len = t.last_dim();
            let d = t.data();
            for c in 0..3 {
                for t in 0..len {
                    if d[(c + 3) * len + t] < 1.0 {
                        let v = d[c * len + t];
                        sum[c] += v;
                        sq[c] += v * v;
                        n[c] += 1;
                    }
                }
            }
        }
        let mut out = Self::identity();
        for c in 0..3 {
            if n[c] > 0 {
                let mean = sum[c] / n[c] as f64;
                let var = (sq[c] / n[c] as f64 - mean * mean).max(0.0);
                out.shift[c] = mean;
                out.scale[c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
            }
        }
        out
    }

    pub fn apply(&self, channels: &mut Tensor) {
        if self.is_identity() {
            return;
        }
        let len = channels.last_dim();
        let d = channels.data_mut();
        for c in 0..3 {
            for t in 0..len {
                if d[(c + 3) * len + t] < 1.0 {
                    d[c * len + t] = (d[c * len + t] - self.shift[c]) / self.scale[c];
                }
            }
        }
    }
}
