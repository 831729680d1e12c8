//! Slowdown events: a median-week speed profile predicts normal speed, slots
//! whose relative prediction error falls below `-alpha` are slowdowns, and
//! only the first slot of each slowdown run is kept as an event.

use std::io::{Read, Write};

use chrono::{Datelike, Timelike};
use thiserror::Error;

use crate::ingest::SpeedSeries;

pub const SLOTS_PER_DAY: usize = 288;
pub const SLOTS_PER_WEEK: usize = 7 * SLOTS_PER_DAY;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("alpha must be a positive number, got {0}")]
    Alpha(f64),
    #[error("profile for '{profile}' does not belong to series '{series}'")]
    ProfileMismatch { profile: String, series: String },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Median speed per 5-minute slot of the civil week (Monday 00:00 first).
#[derive(Debug, Clone, PartialEq)]
pub struct WeekProfile {
    station_id: String,
    medians: Vec<Option<f64>>,
}

impl WeekProfile {
    pub fn station_id(&self) -> &str {
        &self.station_id
    }

    /// `None` where the week slot had no measured samples.
    pub fn medians(&self) -> &[Option<f64>] {
        &self.medians
    }

    pub fn get(&self, week_slot: usize) -> Option<f64> {
        self.medians[week_slot % SLOTS_PER_WEEK]
    }
}

/// Week-slot index of the first slot of `series`, in its own civil time.
pub fn first_week_slot(series: &SpeedSeries) -> usize {
    let local = series.start().naive_local();
    let day = local.weekday().num_days_from_monday() as usize;
    let minute = (local.hour() * 60 + local.minute()) as usize;
    day * SLOTS_PER_DAY + minute / 5
}

/// Per week-slot lower median over measured samples only.
pub fn median_week_profile(series: &SpeedSeries) -> WeekProfile {
    let first = first_week_slot(series);
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); SLOTS_PER_WEEK];
    for (j, (&s, &imp)) in series.speeds().iter().zip(series.imputed()).enumerate() {
        if !imp {
            buckets[(first + j) % SLOTS_PER_WEEK].push(s);
        }
    }
    let medians = buckets
        .into_iter()
        .map(|mut b| {
            if b.is_empty() {
                return None;
            }
            let mid = (b.len() - 1) / 2;
            let (_, m, _) = b.select_nth_unstable_by(mid, f64::total_cmp);
            Some(*m)
        })
        .collect();
    WeekProfile {
        station_id: series.station_id().to_string(),
        medians,
    }
}

/// Slowdown mask `u`: measured slot, defined positive prediction, and
/// `(s - p) / p < -alpha`.
pub fn detect_slowdowns(series: &SpeedSeries, profile: &WeekProfile, alpha: f64) -> Result<Vec<bool>, EventError> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(EventError::Alpha(alpha));
    }
    if profile.station_id != series.station_id() {
        return Err(EventError::ProfileMismatch {
            profile: profile.station_id.clone(),
            series: series.station_id().to_string(),
        });
    }
    let first = first_week_slot(series);
    Ok(series
        .speeds()
        .iter()
        .zip(series.imputed())
        .enumerate()
        .map(|(j, (&s, &imp))| match profile.get(first + j) {
            Some(p) if !imp && p > 0.0 => (s - p) / p < -alpha,
            _ => false,
        })
        .collect())
}

/// First slot of every maximal run of `true`.
pub fn leading_edges(u: &[bool]) -> Vec<bool> {
    u.iter()
        .enumerate()
        .map(|(j, &x)| x && (j == 0 || !u[j - 1]))
        .collect()
}

/// Binary event sequence for one station.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSeries {
    station_id: String,
    events: Vec<bool>,
    slowdown_mask: Vec<bool>,
    alpha: Option<f64>,
}

impl EventSeries {
    /// Events are the leading edges of `slowdown_mask`.
    pub fn from_slowdowns(station_id: impl Into<String>, slowdown_mask: Vec<bool>, alpha: f64) -> Self {
        Self {
            station_id: station_id.into(),
            events: leading_edges(&slowdown_mask),
            slowdown_mask,
            alpha: Some(alpha),
        }
    }

    /// Events given directly (synthetic data, or read back from CSV). The
    /// slowdown mask is taken to be the events themselves.
    pub fn from_events(station_id: impl Into<String>, events: Vec<bool>) -> Self {
        Self {
            station_id: station_id.into(),
            slowdown_mask: events.clone(),
            events,
            alpha: None,
        }
    }

    pub fn station_id(&self) -> &str {
        &self.station_id
    }

    pub fn events(&self) -> &[bool] {
        &self.events
    }

    pub fn slowdown_mask(&self) -> &[bool] {
        &self.slowdown_mask
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn count(&self) -> usize {
        self.events.iter().filter(|&&e| e).count()
    }
}

/// Profile, threshold and edge-detect one series.
pub fn extract_events(series: &SpeedSeries, alpha: f64) -> Result<(EventSeries, WeekProfile), EventError> {
    let profile = median_week_profile(series);
    let u = detect_slowdowns(series, &profile, alpha)?;
    Ok((EventSeries::from_slowdowns(series.station_id(), u, alpha), profile))
}

/// One `station_id,slot_index,event` row per slot.
pub fn write_events_csv<W: Write>(events: &[EventSeries], writer: W) -> Result<(), EventError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["station_id", "slot_index", "event"])?;
    for e in events {
        for (j, &v) in e.events.iter().enumerate() {
            w.write_record([e.station_id.as_str(), &j.to_string(), if v { "1" } else { "0" }])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_events_csv`]. Stations keep their first-appearance
/// order; each must list slots `0..M` exactly once.
pub fn read_events_csv<R: Read>(reader: R) -> Result<Vec<EventSeries>, EventError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut order: Vec<String> = Vec::new();
    let mut slots: std::collections::HashMap<String, Vec<Option<bool>>> = Default::default();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |message: String| EventError::Parse { line, message };
        if record.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", record.len())));
        }
        let station = record[0].to_string();
        let slot: usize = record[1]
            .parse()
            .map_err(|_| parse_err(format!("bad slot_index '{}'", &record[1])))?;
        let value = match &record[2] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(format!("bad event flag '{other}'"))),
        };
        let entry = slots.entry(station.clone()).or_insert_with(|| {
            order.push(station.clone());
            Vec::new()
        });
        if entry.len() <= slot {
            entry.resize(slot + 1, None);
        }
        if entry[slot].replace(value).is_some() {
            return Err(parse_err(format!("duplicate slot {slot} for station '{station}'")));
        }
    }
    order
        .into_iter()
        .map(|station| {
            let values = slots.remove(&station).unwrap_or_default();
            let events = values
                .into_iter()
                .enumerate()
                .map(|(j, v)| {
                    v.ok_or_else(|| EventError::Parse {
                        line: 0,
                        message: format!("station '{station}' is missing slot {j}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(EventSeries::from_events(station, events))
        })
        .collect()
}

/// `station_id,week_slot,median` rows; undefined medians are left empty.
pub fn write_profile_csv<W: Write>(profiles: &[WeekProfile], writer: W) -> Result<(), EventError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["station_id", "week_slot", "median"])?;
    for p in profiles {
        for (k, m) in p.medians.iter().enumerate() {
            let m = m.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([p.station_id.as_str(), &k.to_string(), &m])?;
        }
    }
    w.flush()?;
    Ok(())
}
