//! CSV and JSON-lines readers and writers for sensor and label files.
//!
//! Sensor rows: `participant_id,timestamp_utc,steps,heart_rate,sleep`, one per
//! minute, empty field = missing. Minutes without a row are missing in every
//! stream. Label rows: `participant_id,date,flu_symptoms,kit_trigger,flu_positive,fatigue`
//! with values in {0,1,empty}.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use serde_json::{Map, Value};

use super::{DailyLabels, DayLabel, Dataset, Participant, ParticipantSeries, MINUTES_PER_DAY};
use crate::error::{Error, Result};

pub const SENSOR_HEADER: [&str; 5] = ["participant_id", "timestamp_utc", "steps", "heart_rate", "sleep"];
pub const LABEL_HEADER: [&str; 6] = [
    "participant_id",
    "date",
    "flu_symptoms",
    "kit_trigger",
    "flu_positive",
    "fatigue",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Csv,
    Jsonl,
}

impl FileFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => FileFormat::Jsonl,
            _ => FileFormat::Csv,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            FileFormat::Csv => "csv",
            FileFormat::Jsonl => "jsonl",
        }
    }
}

struct SensorRow {
    participant_id: String,
    timestamp: NaiveDateTime,
    steps: Option<f32>,
    heart_rate: Option<f32>,
    sleep: Option<bool>,
}

struct LabelRow {
    participant_id: String,
    date: NaiveDate,
    label: DayLabel,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_timestamp(raw: &str) -> std::result::Result<NaiveDateTime, String> {
    let s = raw.trim().trim_end_matches('Z');
    let parsed = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .ok_or_else(|| format!("invalid timestamp `{raw}`"))?;
    if parsed.second() != 0 || parsed.nanosecond() != 0 {
        return Err(format!("timestamp `{raw}` is not at minute resolution"));
    }
    Ok(parsed)
}

fn parse_number(raw: &str, field: &str) -> std::result::Result<Option<f32>, String> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(None);
    }
    let v: f32 = s.parse().map_err(|_| format!("invalid {field} `{raw}`"))?;
    if !v.is_finite() || v < 0.0 {
        return Err(format!("{field} must be a non-negative number, got `{raw}`"));
    }
    Ok(Some(v))
}

fn parse_flag(raw: &str, field: &str) -> std::result::Result<Option<bool>, String> {
    match raw.trim() {
        "" => Ok(None),
        "0" | "false" => Ok(Some(false)),
        "1" | "true" => Ok(Some(true)),
        other => Err(format!("{field} must be 0, 1 or empty, got `{other}`")),
    }
}

fn json_field_text(obj: &Map<String, Value>, key: &str) -> std::result::Result<String, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(String::new()),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(Value::Bool(b)) => Ok(if *b { "1" } else { "0" }.to_string()),
        Some(other) => Err(format!("field `{key}` has unsupported value {other}")),
    }
}

/// Reads rows as text fields in header order, regardless of format.
fn for_each_record(
    path: &Path,
    header: &[&str],
    mut f: impl FnMut(usize, &[String]) -> Result<()>,
) -> Result<()> {
    match FileFormat::from_path(path) {
        FileFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .trim(csv::Trim::All)
                .from_path(path)?;
            let found: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
            if found != header {
                return Err(parse_err(path, 1, format!("expected header {}", header.join(","))));
            }
            let mut fields = Vec::with_capacity(header.len());
            for record in reader.records() {
                let record = record?;
                let line = record.position().map_or(0, |p| p.line() as usize);
                if record.len() != header.len() {
                    return Err(parse_err(path, line, format!("expected {} fields", header.len())));
                }
                fields.clear();
                fields.extend(record.iter().map(str::to_string));
                f(line, &fields)?;
            }
        }
        FileFormat::Jsonl => {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                let n = i + 1;
                if line.trim().is_empty() {
                    continue;
                }
                let value: Value = serde_json::from_str(&line).map_err(|e| parse_err(path, n, e.to_string()))?;
                let Value::Object(obj) = value else {
                    return Err(parse_err(path, n, "expected a JSON object"));
                };
                let fields = header
                    .iter()
                    .map(|k| json_field_text(&obj, k))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|m| parse_err(path, n, m))?;
                f(n, &fields)?;
            }
        }
    }
    Ok(())
}

fn parse_sensor_row(fields: &[String]) -> std::result::Result<SensorRow, String> {
    if fields[0].is_empty() {
        return Err("empty participant_id".into());
    }
    Ok(SensorRow {
        participant_id: fields[0].clone(),
        timestamp: parse_timestamp(&fields[1])?,
        steps: parse_number(&fields[2], "steps")?,
        heart_rate: parse_number(&fields[3], "heart_rate")?,
        sleep: parse_flag(&fields[4], "sleep")?,
    })
}

fn parse_label_row(fields: &[String]) -> std::result::Result<LabelRow, String> {
    if fields[0].is_empty() {
        return Err("empty participant_id".into());
    }
    let date = NaiveDate::parse_from_str(fields[1].trim(), "%Y-%m-%d")
        .map_err(|_| format!("invalid date `{}`", fields[1]))?;
    let label = DayLabel {
        flu_symptoms: parse_flag(&fields[2], "flu_symptoms")?,
        kit_trigger: parse_flag(&fields[3], "kit_trigger")?,
        flu_positive: parse_flag(&fields[4], "flu_positive")?,
        fatigue: parse_flag(&fields[5], "fatigue")?,
    };
    label.validate()?;
    Ok(LabelRow {
        participant_id: fields[0].clone(),
        date,
        label,
    })
}

/// Streams of one participant anchored at the day of its first row.
struct SeriesBuilder {
    series: ParticipantSeries,
    last: Option<NaiveDateTime>,
}

impl SeriesBuilder {
    fn new(id: &str, first_day: NaiveDate) -> Self {
        Self {
            series: ParticipantSeries::empty(id, first_day, 0),
            last: None,
        }
    }

    fn grow_to(&mut self, days: usize) {
        let s = &mut self.series;
        if days <= s.n_days {
            return;
        }
        let n = days * MINUTES_PER_DAY;
        s.steps.resize(n, 0.0);
        s.heart_rate.resize(n, 0.0);
        s.sleep.resize(n, false);
        s.missing_steps.resize(n, true);
        s.missing_hr.resize(n, true);
        s.missing_sleep.resize(n, true);
        s.n_days = days;
    }

    /// Re-anchors to `[start, start + n_days)`, padding with missing days.
    fn finish(mut self, start: NaiveDate, n_days: usize) -> ParticipantSeries {
        let lead = (self.series.start_day - start).num_days() as usize;
        let lead_minutes = lead * MINUTES_PER_DAY;
        let old = self.series.n_days;
        self.grow_to(n_days - lead);
        debug_assert!(old + lead <= n_days);
        let s = &mut self.series;
        fn prepend<T: Clone>(v: &mut Vec<T>, n: usize, fill: T) {
            let mut out = vec![fill; n];
            out.append(v);
            *v = out;
        }
        if lead > 0 {
            prepend(&mut s.steps, lead_minutes, 0.0);
            prepend(&mut s.heart_rate, lead_minutes, 0.0);
            prepend(&mut s.sleep, lead_minutes, false);
            prepend(&mut s.missing_steps, lead_minutes, true);
            prepend(&mut s.missing_hr, lead_minutes, true);
            prepend(&mut s.missing_sleep, lead_minutes, true);
        }
        s.start_day = start;
        s.n_days = n_days;
        self.series
    }
}

/// Participant series in order of first appearance, each anchored at its own first day.
fn read_sensor_builders(path: &Path) -> Result<Vec<SeriesBuilder>> {
    let mut builders: Vec<SeriesBuilder> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for_each_record(path, &SENSOR_HEADER, |line, fields| {
        let row = parse_sensor_row(fields).map_err(|m| parse_err(path, line, m))?;
        let slot = match index.get(&row.participant_id) {
            Some(&i) => i,
            None => {
                builders.push(SeriesBuilder::new(&row.participant_id, row.timestamp.date()));
                index.insert(row.participant_id.clone(), builders.len() - 1);
                builders.len() - 1
            }
        };
        let b = &mut builders[slot];
        if let Some(prev) = b.last {
            if row.timestamp == prev {
                return Err(parse_err(
                    path,
                    line,
                    format!("duplicate record for {} at minute {}", row.participant_id, row.timestamp),
                ));
            }
            if row.timestamp < prev {
                return Err(parse_err(
                    path,
                    line,
                    format!(
                        "non-monotonic timestamp for {}: {} after {}",
                        row.participant_id, row.timestamp, prev
                    ),
                ));
            }
        }
        b.last = Some(row.timestamp);
        let day = (row.timestamp.date() - b.series.start_day).num_days() as usize;
        b.grow_to(day + 1);
        let minute = day * MINUTES_PER_DAY + (row.timestamp.hour() * 60 + row.timestamp.minute()) as usize;
        let s = &mut b.series;
        if let Some(v) = row.steps {
            s.steps[minute] = v;
            s.missing_steps[minute] = false;
        }
        if let Some(v) = row.heart_rate {
            s.heart_rate[minute] = v;
            s.missing_hr[minute] = false;
        }
        if let Some(v) = row.sleep {
            s.sleep[minute] = v;
            s.missing_sleep[minute] = false;
        }
        Ok(())
    })?;
    Ok(builders)
}

fn read_label_rows(path: &Path) -> Result<Vec<(usize, LabelRow)>> {
    let mut rows = Vec::new();
    for_each_record(path, &LABEL_HEADER, |line, fields| {
        let row = parse_label_row(fields).map_err(|m| parse_err(path, line, m))?;
        rows.push((line, row));
        Ok(())
    })?;
    Ok(rows)
}

/// Reads a sensor file on its own; the study calendar spans the recorded days.
pub fn load_sensors(path: &Path) -> Result<Vec<ParticipantSeries>> {
    let builders = read_sensor_builders(path)?;
    let Some((start, n_days)) = calendar(&builders, &[]) else {
        return Ok(Vec::new());
    };
    Ok(builders.into_iter().map(|b| b.finish(start, n_days)).collect())
}

/// Reads a labels file into `(participant_id, date, label)` triples.
pub fn load_labels(path: &Path) -> Result<Vec<(String, NaiveDate, DayLabel)>> {
    Ok(read_label_rows(path)?
        .into_iter()
        .map(|(_, r)| (r.participant_id, r.date, r.label))
        .collect())
}

fn calendar(builders: &[SeriesBuilder], labels: &[(usize, LabelRow)]) -> Option<(NaiveDate, usize)> {
    let firsts = builders.iter().map(|b| b.series.start_day);
    let lasts = builders
        .iter()
        .map(|b| b.series.start_day + chrono::Duration::days(b.series.n_days as i64 - 1));
    let label_dates = labels.iter().map(|(_, r)| r.date);
    let start = firsts.chain(label_dates.clone()).min()?;
    let end = lasts.chain(label_dates).max()?;
    Some((start, (end - start).num_days() as usize + 1))
}

/// Loads sensor and label files into a validated [`Dataset`].
///
/// The study calendar runs from the earliest to the latest date in either
/// file; every participant is padded to span it.
pub fn load_dataset(sensor_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let builders = read_sensor_builders(sensor_path)?;
    let labels = read_label_rows(labels_path)?;
    let Some((start, n_days)) = calendar(&builders, &labels) else {
        return Err(Error::Validation("dataset contains no records".into()));
    };

    let index: HashMap<String, usize> = builders
        .iter()
        .enumerate()
        .map(|(i, b)| (b.series.participant_id.clone(), i))
        .collect();
    let mut daily: Vec<DailyLabels> = (0..builders.len()).map(|_| DailyLabels::empty(n_days)).collect();
    let mut seen = vec![vec![false; n_days]; builders.len()];
    for (line, row) in labels {
        let Some(&p) = index.get(&row.participant_id) else {
            return Err(parse_err(
                labels_path,
                line,
                format!("labels reference unknown participant {}", row.participant_id),
            ));
        };
        let day = (row.date - start).num_days() as usize;
        if std::mem::replace(&mut seen[p][day], true) {
            return Err(parse_err(
                labels_path,
                line,
                format!("overlapping label records for {} on {}", row.participant_id, row.date),
            ));
        }
        daily[p].days[day] = row.label;
    }

    let participants = builders
        .into_iter()
        .zip(daily)
        .map(|(b, labels)| Participant {
            series: b.finish(start, n_days),
            labels,
        })
        .collect();
    let dataset = Dataset::new(start, n_days, participants)?;
    dataset.validate()?;
    Ok(dataset)
}

fn flag_text(v: Option<bool>) -> &'static str {
    match v {
        None => "",
        Some(false) => "0",
        Some(true) => "1",
    }
}

fn flag_json(v: Option<bool>) -> Value {
    v.map_or(Value::Null, |b| Value::from(b as u8))
}

/// Streaming writer for a sensor file and a labels file.
pub struct DatasetWriter {
    format: FileFormat,
    sensors: BufWriter<File>,
    labels: BufWriter<File>,
    pub sensor_path: PathBuf,
    pub labels_path: PathBuf,
}

impl DatasetWriter {
    pub fn create(dir: &Path, format: FileFormat) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let sensor_path = dir.join(format!("sensors.{}", format.extension()));
        let labels_path = dir.join(format!("labels.{}", format.extension()));
        let mut sensors = BufWriter::new(File::create(&sensor_path)?);
        let mut labels = BufWriter::new(File::create(&labels_path)?);
        if format == FileFormat::Csv {
            writeln!(sensors, "{}", SENSOR_HEADER.join(","))?;
            writeln!(labels, "{}", LABEL_HEADER.join(","))?;
        }
        Ok(Self {
            format,
            sensors,
            labels,
            sensor_path,
            labels_path,
        })
    }

    /// Writes one participant: a row for every minute with any recorded
    /// stream and a label row for every study day.
    pub fn write(&mut self, p: &Participant) -> Result<()> {
        let s = &p.series;
        let id = &s.participant_id;
        for m in 0..s.n_minutes() {
            if s.missing_steps[m] && s.missing_hr[m] && s.missing_sleep[m] {
                continue;
            }
            let ts = s.date_of(m / MINUTES_PER_DAY).and_hms_opt(0, 0, 0).unwrap()
                + chrono::Duration::minutes((m % MINUTES_PER_DAY) as i64);
            let ts = ts.format("%Y-%m-%dT%H:%M:%SZ");
            let steps = (!s.missing_steps[m]).then_some(s.steps[m]);
            let hr = (!s.missing_hr[m]).then_some(s.heart_rate[m]);
            let sleep = (!s.missing_sleep[m]).then_some(s.sleep[m]);
            match self.format {
                FileFormat::Csv => {
                    let num = |v: Option<f32>| v.map(|x| x.to_string()).unwrap_or_default();
                    writeln!(
                        self.sensors,
                        "{id},{ts},{},{},{}",
                        num(steps),
                        num(hr),
                        flag_text(sleep)
                    )?;
                }
                FileFormat::Jsonl => {
                    let num = |v: Option<f32>| v.map_or(Value::Null, |x| Value::String(x.to_string()));
                    let obj = serde_json::json!({
                        "participant_id": id,
                        "timestamp_utc": ts.to_string(),
                        "steps": num(steps),
                        "heart_rate": num(hr),
                        "sleep": flag_json(sleep),
                    });
                    writeln!(self.sensors, "{obj}")?;
                }
            }
        }
        for (day, l) in p.labels.days.iter().enumerate() {
            let date = s.date_of(day);
            match self.format {
                FileFormat::Csv => writeln!(
                    self.labels,
                    "{id},{date},{},{},{},{}",
                    flag_text(l.flu_symptoms),
                    flag_text(l.kit_trigger),
                    flag_text(l.flu_positive),
                    flag_text(l.fatigue)
                )?,
                FileFormat::Jsonl => {
                    let obj = serde_json::json!({
                        "participant_id": id,
                        "date": date.to_string(),
                        "flu_symptoms": flag_json(l.flu_symptoms),
                        "kit_trigger": flag_json(l.kit_trigger),
                        "flu_positive": flag_json(l.flu_positive),
                        "fatigue": flag_json(l.fatigue),
                    });
                    writeln!(self.labels, "{obj}")?;
                }
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(PathBuf, PathBuf)> {
        self.sensors.flush()?;
        self.labels.flush()?;
        Ok((self.sensor_path, self.labels_path))
    }
}

/// Writes a whole dataset into `dir` as `sensors.<ext>` and `labels.<ext>`.
pub fn write_dataset(dataset: &Dataset, dir: &Path, format: FileFormat) -> Result<(PathBuf, PathBuf)> {
    let mut w = DatasetWriter::create(dir, format)?;
    for p in &dataset.participants {
        w.write(p)?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamps_accept_common_iso_forms() {
        for s in ["2021-03-01T10:15:00Z", "2021-03-01T10:15Z", "2021-03-01 10:15", "2021-03-01T10:15:00"] {
            let t = parse_timestamp(s).unwrap();
            assert_eq!((t.hour(), t.minute()), (10, 15), "{s}");
        }
        assert!(parse_timestamp("2021-03-01T10:15:30Z").is_err());
        assert!(parse_timestamp("yesterday").is_err());
    }

    #[test]
    fn flags_and_numbers() {
        assert_eq!(parse_flag("", "x").unwrap(), None);
        assert_eq!(parse_flag("1", "x").unwrap(), Some(true));
        assert!(parse_flag("2", "x").is_err());
        assert_eq!(parse_number(" 12 ", "steps").unwrap(), Some(12.0));
        assert!(parse_number("-1", "steps").is_err());
    }
}
