//! Loading and validation of station speed series, station metadata and
//! drive-time matrices.
//!
//! Speed CSV columns: `station_id,timestamp_iso8601,mean_speed,imputed`.
//! Every station becomes one contiguous [`SpeedSeries`] on the absolute
//! 5-minute grid; missing slots are filled with `imputed = true` placeholders.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Duration, FixedOffset, NaiveDateTime, SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Length of one sampling slot.
pub const SLOT_SECONDS: i64 = 300;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: timestamp '{timestamp}' is not on a 5-minute boundary")]
    Format { line: u64, timestamp: String },
    #[error("series for station '{0}' is empty")]
    EmptySeries(String),
    #[error("inconsistent dataset: {0}")]
    Consistency(String),
    #[error("invalid drive-time matrix: {0}")]
    Validation(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Write(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IngestError>;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Travel direction of a station.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    N,
    S,
    E,
    W,
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "N" | "NB" | "NORTH" | "NORTHBOUND" => Ok(Direction::N),
            "S" | "SB" | "SOUTH" | "SOUTHBOUND" => Ok(Direction::S),
            "E" | "EB" | "EAST" | "EASTBOUND" => Ok(Direction::E),
            "W" | "WB" | "WEST" | "WESTBOUND" => Ok(Direction::W),
            other => Err(format!("unknown direction '{other}'")),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Direction::N => "N",
            Direction::S => "S",
            Direction::E => "E",
            Direction::W => "W",
        };
        f.write_str(s)
    }
}

/// Static description of a measurement station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationMeta {
    pub station_id: String,
    /// Road designator, e.g. `I-105`. Empty when unknown.
    pub road: String,
    pub direction: Direction,
    pub latitude: f64,
    pub longitude: f64,
    pub sensor_type: String,
}

/// Contiguous 5-minute mean speeds for one station.
///
/// Slot `j` covers `[start + 5j min, start + 5(j+1) min)`. `start` keeps the
/// UTC offset it was read with; that offset defines the civil week used by
/// the median-week profile.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedSeries {
    station_id: String,
    start: DateTime<FixedOffset>,
    speeds: Vec<f64>,
    imputed: Vec<bool>,
}

impl SpeedSeries {
    pub fn new(
        station_id: impl Into<String>,
        start: DateTime<FixedOffset>,
        speeds: Vec<f64>,
        imputed: Vec<bool>,
    ) -> Result<Self> {
        let station_id = station_id.into();
        if speeds.len() != imputed.len() {
            return Err(IngestError::Consistency(format!(
                "station '{station_id}': {} speeds but {} imputed flags",
                speeds.len(),
                imputed.len()
            )));
        }
        if let Some(bad) = speeds.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(IngestError::Consistency(format!(
                "station '{station_id}': speed {bad} is not a non-negative number"
            )));
        }
        if start.timestamp().rem_euclid(SLOT_SECONDS) != 0 || start.timestamp_subsec_nanos() != 0 {
            return Err(IngestError::Format {
                line: 0,
                timestamp: start.to_rfc3339(),
            });
        }
        Ok(Self {
            station_id,
            start,
            speeds,
            imputed,
        })
    }

    pub fn station_id(&self) -> &str {
        &self.station_id
    }

    pub fn start(&self) -> DateTime<FixedOffset> {
        self.start
    }

    pub fn speeds(&self) -> &[f64] {
        &self.speeds
    }

    pub fn imputed(&self) -> &[bool] {
        &self.imputed
    }

    /// Number of slots `M`.
    pub fn len(&self) -> usize {
        self.speeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds.is_empty()
    }

    pub fn slot_time(&self, slot: usize) -> DateTime<FixedOffset> {
        self.start + Duration::seconds(SLOT_SECONDS * slot as i64)
    }

    /// Absolute slot number of the first slot (seconds since epoch / 300).
    pub fn start_slot(&self) -> i64 {
        self.start.timestamp().div_euclid(SLOT_SECONDS)
    }

    /// Re-index onto `[first_slot, first_slot + len)` (absolute slot numbers),
    /// padding with imputed placeholders. The window must cover the series.
    pub fn padded_to(&self, first_slot: i64, len: usize) -> Result<SpeedSeries> {
        let offset = self.start_slot() - first_slot;
        if offset < 0 || offset as usize + self.len() > len {
            return Err(IngestError::Parameter(format!(
                "padding window does not cover station '{}'",
                self.station_id
            )));
        }
        let offset = offset as usize;
        let mut speeds: Vec<Option<f64>> = vec![None; len];
        let mut imputed = vec![true; len];
        let mut reliable = vec![false; len];
        for (k, (&s, &imp)) in self.speeds.iter().zip(&self.imputed).enumerate() {
            speeds[offset + k] = Some(s);
            imputed[offset + k] = imp;
            reliable[offset + k] = !imp;
        }
        let speeds = fill_gaps(&speeds, &reliable);
        let start = self.start - Duration::seconds(SLOT_SECONDS * offset as i64);
        SpeedSeries::new(self.station_id.clone(), start, speeds, imputed)
    }
}

/// Fill `None` slots with the value of the nearest reliable slot (earlier
/// slot wins ties). Falls back to the nearest present value of any kind,
/// then to zero when nothing is present.
fn fill_gaps(values: &[Option<f64>], reliable: &[bool]) -> Vec<f64> {
    let nearest = |pick: &dyn Fn(usize) -> bool| -> Vec<Option<usize>> {
        let n = values.len();
        let mut prev = vec![None; n];
        let mut next = vec![None; n];
        let mut last = None;
        for j in 0..n {
            if pick(j) {
                last = Some(j);
            }
            prev[j] = last;
        }
        last = None;
        for j in (0..n).rev() {
            if pick(j) {
                last = Some(j);
            }
            next[j] = last;
        }
        (0..n)
            .map(|j| match (prev[j], next[j]) {
                (Some(p), Some(q)) => Some(if j - p <= q - j { p } else { q }),
                (Some(p), None) => Some(p),
                (None, q) => q,
            })
            .collect()
    };
    let by_reliable = nearest(&|j| reliable[j] && values[j].is_some());
    let by_present = nearest(&|j| values[j].is_some());
    values
        .iter()
        .enumerate()
        .map(|(j, v)| match v {
            Some(v) => *v,
            None => by_reliable[j]
                .or(by_present[j])
                .and_then(|k| values[k])
                .unwrap_or(0.0),
        })
        .collect()
}

/// Parse an ISO-8601 timestamp. Timestamps without an offset are taken as UTC.
pub fn parse_timestamp(raw: &str) -> std::result::Result<DateTime<FixedOffset>, String> {
    let raw = raw.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Ok(t);
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(raw, fmt) {
            let utc = FixedOffset::east_opt(0).expect("zero offset");
            return Ok(utc.from_utc_datetime(&naive));
        }
    }
    Err(format!("cannot parse timestamp '{raw}'"))
}

pub fn format_timestamp(t: DateTime<FixedOffset>) -> String {
    if t.offset().local_minus_utc() == 0 {
        t.with_timezone(&Utc).to_rfc3339_opts(SecondsFormat::Secs, true)
    } else {
        t.to_rfc3339_opts(SecondsFormat::Secs, false)
    }
}

fn parse_flag(raw: &str) -> Option<bool> {
    match raw.trim() {
        "0" | "false" | "FALSE" | "False" => Some(false),
        "1" | "true" | "TRUE" | "True" => Some(true),
        _ => None,
    }
}

struct RawRow {
    slot: i64,
    time: DateTime<FixedOffset>,
    speed: f64,
    imputed: bool,
    line: u64,
}

/// Read speed rows and assemble one gap-filled series per station, ordered
/// by station id.
pub fn read_speed_csv<R: Read>(reader: R) -> Result<Vec<SpeedSeries>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: BTreeMap<String, Vec<RawRow>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 4 {
            return Err(IngestError::Parse {
                line,
                message: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let station = record[0].to_string();
        if station.is_empty() {
            return Err(IngestError::Parse {
                line,
                message: "empty station_id".into(),
            });
        }
        let time = parse_timestamp(&record[1]).map_err(|message| IngestError::Parse { line, message })?;
        if time.timestamp().rem_euclid(SLOT_SECONDS) != 0 || time.timestamp_subsec_nanos() != 0 {
            return Err(IngestError::Format {
                line,
                timestamp: record[1].to_string(),
            });
        }
        let speed: f64 = record[2].parse().map_err(|_| IngestError::Parse {
            line,
            message: format!("bad mean_speed '{}'", &record[2]),
        })?;
        if !speed.is_finite() || speed < 0.0 {
            return Err(IngestError::Parse {
                line,
                message: format!("mean_speed {speed} is not a non-negative number"),
            });
        }
        let imputed = parse_flag(&record[3]).ok_or_else(|| IngestError::Parse {
            line,
            message: format!("bad imputed flag '{}'", &record[3]),
        })?;
        rows.entry(station).or_default().push(RawRow {
            slot: time.timestamp().div_euclid(SLOT_SECONDS),
            time,
            speed,
            imputed,
            line,
        });
    }

    rows.into_iter()
        .map(|(station, mut rows)| {
            rows.sort_by_key(|r| r.slot);
            for pair in rows.windows(2) {
                if pair[0].slot == pair[1].slot {
                    return Err(IngestError::Parse {
                        line: pair[1].line,
                        message: format!("duplicate timestamp for station '{station}'"),
                    });
                }
            }
            let first = rows[0].slot;
            let len = (rows[rows.len() - 1].slot - first + 1) as usize;
            let mut values = vec![None; len];
            let mut imputed = vec![true; len];
            let mut reliable = vec![false; len];
            for r in &rows {
                let k = (r.slot - first) as usize;
                values[k] = Some(r.speed);
                imputed[k] = r.imputed;
                reliable[k] = !r.imputed;
            }
            let speeds = fill_gaps(&values, &reliable);
            SpeedSeries::new(station, rows[0].time, speeds, imputed)
        })
        .collect()
}

pub fn load_speed_csv(path: impl AsRef<Path>) -> Result<Vec<SpeedSeries>> {
    read_speed_csv(open(path.as_ref())?)
}

pub fn write_speed_csv<W: Write>(series: &[SpeedSeries], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["station_id", "timestamp_iso8601", "mean_speed", "imputed"])?;
    for s in series {
        for j in 0..s.len() {
            w.write_record([
                s.station_id.as_str(),
                &format_timestamp(s.slot_time(j)),
                &s.speeds[j].to_string(),
                if s.imputed[j] { "1" } else { "0" },
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_speed_csv(series: &[SpeedSeries], path: impl AsRef<Path>) -> Result<()> {
    write_speed_csv(series, create(path.as_ref())?)
}

/// Pad every series onto one shared slot axis spanning all of them.
pub fn align_series(series: &[SpeedSeries]) -> Result<Vec<SpeedSeries>> {
    let Some(first) = series.iter().map(|s| s.start_slot()).min() else {
        return Ok(Vec::new());
    };
    let end = series
        .iter()
        .map(|s| s.start_slot() + s.len() as i64)
        .max()
        .unwrap_or(first);
    let len = (end - first) as usize;
    series.iter().map(|s| s.padded_to(first, len)).collect()
}

/// Fraction of slots carrying a measured (non-imputed) value.
pub fn completeness(series: &SpeedSeries) -> Result<f64> {
    if series.is_empty() {
        return Err(IngestError::EmptySeries(series.station_id.clone()));
    }
    let measured = series.imputed.iter().filter(|&&imp| !imp).count();
    Ok(measured as f64 / series.len() as f64)
}

/// Keep the stations whose completeness is at least `min_completeness`.
///
/// Returns the retained series with their metadata in the same order.
pub fn filter_stations(
    series: Vec<SpeedSeries>,
    meta: &[StationMeta],
    min_completeness: f64,
) -> Result<(Vec<SpeedSeries>, Vec<StationMeta>)> {
    if !(0.0..=1.0).contains(&min_completeness) {
        return Err(IngestError::Parameter(format!(
            "min_completeness {min_completeness} outside [0, 1]"
        )));
    }
    let by_id: HashMap<&str, &StationMeta> = meta.iter().map(|m| (m.station_id.as_str(), m)).collect();
    let mut kept_series = Vec::new();
    let mut kept_meta = Vec::new();
    for s in series {
        let m = by_id.get(s.station_id()).ok_or_else(|| {
            IngestError::Consistency(format!("station '{}' has no metadata", s.station_id()))
        })?;
        if completeness(&s)? >= min_completeness {
            kept_meta.push((*m).clone());
            kept_series.push(s);
        }
    }
    Ok((kept_series, kept_meta))
}

#[derive(Deserialize)]
struct MetaRow {
    station_id: String,
    road: String,
    direction: String,
    lat: f64,
    lon: f64,
    #[serde(rename = "type")]
    sensor_type: String,
}

pub fn read_station_meta<R: Read>(reader: R) -> Result<Vec<StationMeta>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.deserialize::<MetaRow>() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            IngestError::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = out.len() as u64 + 2;
        let direction = row
            .direction
            .parse()
            .map_err(|message| IngestError::Parse { line, message })?;
        if !seen.insert(row.station_id.clone()) {
            return Err(IngestError::Parse {
                line,
                message: format!("duplicate station_id '{}'", row.station_id),
            });
        }
        out.push(StationMeta {
            station_id: row.station_id,
            road: row.road,
            direction,
            latitude: row.lat,
            longitude: row.lon,
            sensor_type: row.sensor_type,
        });
    }
    Ok(out)
}

pub fn load_station_meta(path: impl AsRef<Path>) -> Result<Vec<StationMeta>> {
    read_station_meta(open(path.as_ref())?)
}

pub fn write_station_meta<W: Write>(meta: &[StationMeta], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["station_id", "road", "direction", "lat", "lon", "type"])?;
    for m in meta {
        w.write_record([
            m.station_id.clone(),
            m.road.clone(),
            m.direction.to_string(),
            m.latitude.to_string(),
            m.longitude.to_string(),
            m.sensor_type.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Free-flow drive times between stations, in minutes.
///
/// `minutes(i, j)` is the time to drive from station `i` to station `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveTimeMatrix {
    station_ids: Vec<String>,
    index: HashMap<String, usize>,
    minutes: Vec<f64>,
}

impl DriveTimeMatrix {
    pub fn new(station_ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = station_ids.len();
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(IngestError::Validation(format!(
                "matrix is not square over {n} stations"
            )));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, id) in station_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(IngestError::Validation(format!("duplicate station '{id}'")));
            }
        }
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(IngestError::Validation(format!(
                        "entry ({}, {}) = {v} is not a non-negative number",
                        station_ids[i], station_ids[j]
                    )));
                }
                if i == j && v != 0.0 {
                    return Err(IngestError::Validation(format!(
                        "diagonal entry for '{}' is {v}, expected 0",
                        station_ids[i]
                    )));
                }
            }
        }
        Ok(Self {
            station_ids,
            index,
            minutes: rows.into_iter().flatten().collect(),
        })
    }

    pub fn station_ids(&self) -> &[String] {
        &self.station_ids
    }

    pub fn len(&self) -> usize {
        self.station_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.station_ids.is_empty()
    }

    pub fn index_of(&self, station_id: &str) -> Option<usize> {
        self.index.get(station_id).copied()
    }

    pub fn minutes(&self, i: usize, j: usize) -> f64 {
        self.minutes[i * self.len() + j]
    }

    pub fn minutes_between(&self, from: &str, to: &str) -> Option<f64> {
        Some(self.minutes(self.index_of(from)?, self.index_of(to)?))
    }

    /// Restrict (and reorder) to the given stations.
    pub fn subset(&self, station_ids: &[String]) -> Result<DriveTimeMatrix> {
        let idx: Vec<usize> = station_ids
            .iter()
            .map(|id| {
                self.index_of(id).ok_or_else(|| {
                    IngestError::Consistency(format!("station '{id}' missing from drive-time matrix"))
                })
            })
            .collect::<Result<_>>()?;
        let rows = idx
            .iter()
            .map(|&i| idx.iter().map(|&j| self.minutes(i, j)).collect())
            .collect();
        DriveTimeMatrix::new(station_ids.to_vec(), rows)
    }
}

/// Read a drive-time CSV: a header row of station ids (first cell ignored),
/// then one row per station starting with its id. Rows may come in any order.
pub fn read_drive_times<R: Read>(reader: R) -> Result<DriveTimeMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(IngestError::Validation("empty drive-time file".into())),
    };
    let ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n = ids.len();
    let col: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    if col.len() != n {
        return Err(IngestError::Validation("duplicate station in header".into()));
    }
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut count = 0;
    for record in records {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        count += 1;
        if record.len() != n + 1 {
            return Err(IngestError::Validation(format!(
                "line {line}: expected {} cells, found {} (matrix not square)",
                n + 1,
                record.len()
            )));
        }
        let id = &record[0];
        let i = *col.get(id).ok_or_else(|| {
            IngestError::Validation(format!("line {line}: row station '{id}' not in header"))
        })?;
        if rows[i].is_some() {
            return Err(IngestError::Validation(format!("line {line}: duplicate row '{id}'")));
        }
        let values = record
            .iter()
            .skip(1)
            .map(|c| {
                c.parse::<f64>().map_err(|_| IngestError::Parse {
                    line,
                    message: format!("bad drive time '{c}'"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows[i] = Some(values);
    }
    if count != n {
        return Err(IngestError::Validation(format!(
            "{count} rows for {n} columns (matrix not square)"
        )));
    }
    let rows = rows.into_iter().map(|r| r.expect("all rows present")).collect();
    DriveTimeMatrix::new(ids, rows)
}

pub fn load_drive_times(path: impl AsRef<Path>) -> Result<DriveTimeMatrix> {
    read_drive_times(open(path.as_ref())?)
}

pub fn write_drive_times<W: Write>(matrix: &DriveTimeMatrix, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![String::new()];
    header.extend(matrix.station_ids.iter().cloned());
    w.write_record(&header)?;
    for (i, id) in matrix.station_ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend((0..matrix.len()).map(|j| matrix.minutes(i, j).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
