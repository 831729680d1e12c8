//! Synthetic event networks with planted causal edges.
//!
//! Every station fires spontaneously with probability `p_s` per slot. A
//! planted edge `(cause, effect, lag, p_c)` makes each cause event at slot
//! `t` trigger an effect event at `t + lag` with probability `p_c`; caused
//! and spontaneous events combine by logical OR. Caused events trigger
//! further edges in turn, so chains and cycles of edges cascade.
//!
//! Randomness is keyed: station `s` draws its spontaneous events from
//! ChaCha8 stream `(seed, 4s)` and edge `e` its triggers from stream
//! `(seed, 2^40 + e)`, one draw per slot. Changing one edge therefore leaves
//! every other station's spontaneous events untouched.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, FixedOffset, Timelike};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{write_events_csv, EventError, EventSeries};
use crate::ingest::{
    parse_timestamp, write_drive_times, write_speed_csv, write_station_meta, Direction, DriveTimeMatrix, IngestError,
    SpeedSeries, StationMeta, SLOT_SECONDS,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Events(#[from] EventError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A planted causal edge between station indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedEdge {
    pub cause: usize,
    pub effect: usize,
    pub lag: usize,
    pub p_c: f64,
}

/// Draw `count` distinct edges between distinct stations, with lags uniform
/// in `1..=l_max` and `p_c` uniform in `[p_c_min, p_c_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomEdges {
    pub count: usize,
    pub p_c_min: f64,
    pub p_c_max: f64,
}

fn default_l_max() -> usize {
    8
}

fn default_start() -> String {
    // a Monday
    "2024-01-01T00:00:00Z".into()
}

fn default_stations_per_road() -> usize {
    10
}

fn default_depth() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_stations: usize,
    pub n_slots: usize,
    pub p_s: f64,
    #[serde(default)]
    pub edges: Vec<PlantedEdge>,
    /// Extra edges drawn from the seed, appended after `edges`.
    #[serde(default)]
    pub random_edges: Option<RandomEdges>,
    pub seed: u64,
    #[serde(default = "default_l_max")]
    pub l_max: usize,
    /// Timestamp of slot 0 in the speed output.
    #[serde(default = "default_start")]
    pub start: String,
    /// Fraction of slots flagged as imputed in the speed output.
    #[serde(default)]
    pub imputed_fraction: f64,
    /// Relative speed drop in an event slot.
    #[serde(default = "default_depth")]
    pub event_depth: f64,
    #[serde(default = "default_stations_per_road")]
    pub stations_per_road: usize,
}

impl SynthSpec {
    pub fn new(n_stations: usize, n_slots: usize, p_s: f64, edges: Vec<PlantedEdge>, seed: u64) -> Self {
        Self {
            n_stations,
            n_slots,
            p_s,
            edges,
            random_edges: None,
            seed,
            l_max: default_l_max(),
            start: default_start(),
            imputed_fraction: 0.0,
            event_depth: default_depth(),
            stations_per_road: default_stations_per_road(),
        }
    }

    pub fn from_json<R: Read>(reader: R) -> Result<Self, SynthError> {
        Ok(serde_json::from_reader(reader)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(file)
    }

    fn check_probability(name: &str, p: f64) -> Result<(), SynthError> {
        if (0.0..=1.0).contains(&p) {
            Ok(())
        } else {
            Err(SynthError::Spec(format!("{name} = {p} outside [0, 1]")))
        }
    }

    /// The explicit edges plus any random ones, validated.
    pub fn resolved_edges(&self) -> Result<Vec<PlantedEdge>, SynthError> {
        Self::check_probability("p_s", self.p_s)?;
        Self::check_probability("imputed_fraction", self.imputed_fraction)?;
        Self::check_probability("event_depth", self.event_depth)?;
        if self.n_stations == 0 || self.n_slots == 0 {
            return Err(SynthError::Spec("need at least one station and one slot".into()));
        }
        if self.l_max == 0 || self.stations_per_road == 0 {
            return Err(SynthError::Spec("l_max and stations_per_road must be positive".into()));
        }
        let mut edges = self.edges.clone();
        if let Some(r) = self.random_edges {
            Self::check_probability("p_c_min", r.p_c_min)?;
            Self::check_probability("p_c_max", r.p_c_max)?;
            if r.p_c_min > r.p_c_max {
                return Err(SynthError::Spec("p_c_min exceeds p_c_max".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(1 << 41);
            let mut pairs: Vec<(usize, usize)> = (0..self.n_stations)
                .flat_map(|i| (0..self.n_stations).filter(move |&j| j != i).map(move |j| (i, j)))
                .filter(|&(i, j)| !edges.iter().any(|e| (e.cause, e.effect) == (i, j)))
                .collect();
            if pairs.len() < r.count {
                return Err(SynthError::Spec(format!(
                    "cannot draw {} random edges from {} free station pairs",
                    r.count,
                    pairs.len()
                )));
            }
            pairs.shuffle(&mut rng);
            for &(cause, effect) in &pairs[..r.count] {
                let lag = rng.gen_range(1..=self.l_max);
                let p_c = r.p_c_min + (r.p_c_max - r.p_c_min) * rng.gen::<f64>();
                edges.push(PlantedEdge { cause, effect, lag, p_c });
            }
        }
        for (k, e) in edges.iter().enumerate() {
            if e.cause >= self.n_stations || e.effect >= self.n_stations {
                return Err(SynthError::Spec(format!(
                    "edge {k} ({} -> {}) refers to a station >= {}",
                    e.cause, e.effect, self.n_stations
                )));
            }
            if e.cause == e.effect {
                return Err(SynthError::Spec(format!("edge {k} is a self-edge on station {}", e.cause)));
            }
            if !(1..=self.l_max).contains(&e.lag) {
                return Err(SynthError::Spec(format!("edge {k} lag {} outside [1, {}]", e.lag, self.l_max)));
            }
            Self::check_probability("p_c", e.p_c)?;
            if edges[..k].iter().any(|o| (o.cause, o.effect, o.lag) == (e.cause, e.effect, e.lag)) {
                return Err(SynthError::Spec(format!(
                    "edge ({}, {}, {}) planted twice",
                    e.cause, e.effect, e.lag
                )));
            }
        }
        Ok(edges)
    }
}

/// `n` uniform draws from stream `stream` of `seed`, one per slot.
fn bernoulli_stream(seed: u64, stream: u64, n: usize, p: f64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| rng.gen::<f64>() < p).collect()
}

const SPONTANEOUS: u64 = 0;
const IMPUTATION: u64 = 1;
const NOISE: u64 = 2;
const EDGE_BASE: u64 = 1 << 40;
const LAYOUT: u64 = (1 << 41) + 1;

/// A generated network: events per station plus the planted edges.
#[derive(Debug, Clone)]
pub struct SyntheticNetwork {
    pub spec: SynthSpec,
    pub station_ids: Vec<String>,
    pub events: Vec<EventSeries>,
    pub edges: Vec<PlantedEdge>,
}

/// Simulate the network described by `spec`.
pub fn generate_network(spec: &SynthSpec) -> Result<SyntheticNetwork, SynthError> {
    let edges = spec.resolved_edges()?;
    let n = spec.n_slots;
    let mut events: Vec<Vec<bool>> = (0..spec.n_stations)
        .into_par_iter()
        .map(|s| bernoulli_stream(spec.seed, 4 * s as u64 + SPONTANEOUS, n, spec.p_s))
        .collect();
    let triggers: Vec<Vec<bool>> = edges
        .par_iter()
        .enumerate()
        .map(|(k, e)| bernoulli_stream(spec.seed, EDGE_BASE + k as u64, n, e.p_c))
        .collect();
    // lags are at least 1, so everything at t - lag is final when slot t is filled
    if !edges.is_empty() {
        for t in 0..n {
            for (e, fire) in edges.iter().zip(&triggers) {
                if t >= e.lag && fire[t] && events[e.cause][t - e.lag] {
                    events[e.effect][t] = true;
                }
            }
        }
    }
    let width = (spec.n_stations.max(2) - 1).to_string().len();
    let station_ids: Vec<String> = (0..spec.n_stations).map(|s| format!("S{s:0width$}")).collect();
    let events = station_ids
        .iter()
        .zip(events)
        .map(|(id, ev)| EventSeries::from_events(id.clone(), ev))
        .collect();
    Ok(SyntheticNetwork {
        spec: spec.clone(),
        station_ids,
        events,
        edges,
    })
}

/// A cause/effect pair under the pair model: `cause` is Bernoulli(`p_s`);
/// `effect` fires at `t + lag` if its own Bernoulli(`p_s`) fires or the cause
/// fired at `t` and a Bernoulli(`p_c`) succeeds.
pub fn generate_event_pair(
    p_s: f64,
    p_c: f64,
    lag: usize,
    n_slots: usize,
    seed: u64,
) -> Result<(EventSeries, EventSeries), SynthError> {
    let mut spec = SynthSpec::new(
        2,
        n_slots,
        p_s,
        vec![PlantedEdge {
            cause: 0,
            effect: 1,
            lag,
            p_c,
        }],
        seed,
    );
    spec.l_max = spec.l_max.max(lag);
    let mut net = generate_network(&spec)?;
    let effect = net.events.pop().expect("two stations");
    let cause = net.events.pop().expect("two stations");
    Ok((cause, effect))
}

impl SyntheticNetwork {
    /// Planted edges as `(cause_id, effect_id, lag)`.
    pub fn truth_tuples(&self) -> Vec<(String, String, usize)> {
        self.edges
            .iter()
            .map(|e| (self.station_ids[e.cause].clone(), self.station_ids[e.effect].clone(), e.lag))
            .collect()
    }

    fn start(&self) -> Result<DateTime<FixedOffset>, SynthError> {
        parse_timestamp(&self.spec.start).map_err(|m| SynthError::Spec(format!("start: {m}")))
    }

    /// Speed series whose slowdown leading edges reproduce the events:
    /// a weekly free-flow pattern with rush-hour dips and 1% noise, dropped by
    /// `event_depth` in every event slot. Back-to-back events merge into one
    /// slowdown and so read back as a single event.
    pub fn speed_series(&self) -> Result<Vec<SpeedSeries>, SynthError> {
        let start = self.start()?;
        if start.timestamp().rem_euclid(SLOT_SECONDS) != 0 {
            return Err(SynthError::Spec(format!("start {} is not on a 5-minute boundary", self.spec.start)));
        }
        let seed = self.spec.seed;
        let n = self.spec.n_slots;
        let baseline: Vec<f64> = (0..n)
            .map(|j| {
                let t = start + chrono::Duration::seconds(SLOT_SECONDS * j as i64);
                let hour = t.hour() as f64 + t.minute() as f64 / 60.0;
                let weekday = t.weekday().num_days_from_monday() < 5;
                let dip = |centre: f64, width: f64| (-((hour - centre) / width).powi(2)).exp();
                if weekday {
                    1.0 - 0.25 * dip(8.0, 1.0) - 0.3 * dip(17.5, 1.2)
                } else {
                    1.0 - 0.1 * dip(14.0, 2.0)
                }
            })
            .collect();
        self.events
            .par_iter()
            .enumerate()
            .map(|(s, ev)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(4 * s as u64 + NOISE);
                let free_flow = 55.0 + 15.0 * rng.gen::<f64>();
                let imputed = bernoulli_stream(seed, 4 * s as u64 + IMPUTATION, n, self.spec.imputed_fraction);
                let speeds = (0..n)
                    .map(|j| {
                        let noise = 1.0 + 0.01 * (2.0 * rng.gen::<f64>() - 1.0);
                        let mut v = free_flow * baseline[j] * noise;
                        if ev.events()[j] && !imputed[j] {
                            v *= 1.0 - self.spec.event_depth;
                        }
                        (v * 100.0).round() / 100.0
                    })
                    .collect();
                Ok(SpeedSeries::new(ev.station_id(), start, speeds, imputed)?)
            })
            .collect()
    }

    /// Stations laid out in groups of `stations_per_road`, each group on
    /// its own northbound road.
    pub fn station_meta(&self) -> Vec<StationMeta> {
        let layout = self.layout();
        self.station_ids
            .iter()
            .enumerate()
            .map(|(s, id)| StationMeta {
                station_id: id.clone(),
                road: format!("SYN-{}", s / self.spec.stations_per_road + 1),
                direction: Direction::N,
                latitude: 34.0 + layout[s].1 / 111.0,
                longitude: -118.0 + layout[s].0 / 92.0,
                sensor_type: "ML".into(),
            })
            .collect()
    }

    /// Random positions in a 40 km square, km.
    fn layout(&self) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(LAYOUT);
        (0..self.spec.n_stations)
            .map(|_| (40.0 * rng.gen::<f64>(), 40.0 * rng.gen::<f64>()))
            .collect()
    }

    /// Free-flow drive minutes at 100 kph over 1.3 times the straight-line
    /// distance, with up to 10% per-direction asymmetry.
    pub fn drive_times(&self) -> Result<DriveTimeMatrix, SynthError> {
        let layout = self.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(LAYOUT + 1);
        let n = self.spec.n_stations;
        let mut rows = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let asym = 1.0 + 0.1 * rng.gen::<f64>();
                if i != j {
                    let (dx, dy) = (layout[i].0 - layout[j].0, layout[i].1 - layout[j].1);
                    let km = 1.3 * (dx * dx + dy * dy).sqrt();
                    rows[i][j] = (km / 100.0 * 60.0 * asym * 1000.0).round() / 1000.0;
                }
            }
        }
        Ok(DriveTimeMatrix::new(self.station_ids.clone(), rows)?)
    }

    /// Write `speeds.csv`, `meta.csv`, `drive_times.csv`, `events.csv` and
    /// `truth.csv` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| SynthError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let create = |name: &str| {
            let path = dir.join(name);
            File::create(&path).map(BufWriter::new).map_err(io(&path))
        };
        write_speed_csv(&self.speed_series()?, create("speeds.csv")?)?;
        write_station_meta(&self.station_meta(), create("meta.csv")?)?;
        write_drive_times(&self.drive_times()?, create("drive_times.csv")?)?;
        write_events_csv(&self.events, create("events.csv")?)?;
        write_truth_csv(&self.station_ids, &self.edges, create("truth.csv")?)?;
        Ok(())
    }
}

/// `cause,effect,lag,p_c` rows with station ids.
pub fn write_truth_csv<W: Write>(ids: &[String], edges: &[PlantedEdge], writer: W) -> Result<(), SynthError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["cause", "effect", "lag", "p_c"])?;
    for e in edges {
        w.write_record([
            ids[e.cause].clone(),
            ids[e.effect].clone(),
            e.lag.to_string(),
            e.p_c.to_string(),
        ])?;
    }
    w.flush().map_err(|source| SynthError::Io {
        path: "truth.csv".into(),
        source,
    })?;
    Ok(())
}

/// A planted edge read back from `truth.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthEdge {
    pub cause: String,
    pub effect: String,
    pub lag: usize,
    pub p_c: Option<f64>,
}

pub fn read_truth_csv<R: Read>(reader: R) -> Result<Vec<TruthEdge>, SynthError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ci), Some(ei), Some(li)) = (col("cause"), col("effect"), col("lag")) else {
        return Err(SynthError::Parse {
            line: 1,
            message: "truth file needs cause, effect and lag columns".into(),
        });
    };
    let pi = col("p_c");
    rdr.records()
        .map(|record| {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let lag = record[li].parse().map_err(|_| SynthError::Parse {
                line,
                message: format!("bad lag '{}'", &record[li]),
            })?;
            let p_c = match pi.map(|i| &record[i]) {
                Some(s) if !s.is_empty() => Some(s.parse().map_err(|_| SynthError::Parse {
                    line,
                    message: format!("bad p_c '{s}'"),
                })?),
                _ => None,
            };
            Ok(TruthEdge {
                cause: record[ci].to_string(),
                effect: record[ei].to_string(),
                lag,
                p_c,
            })
        })
        .collect()
}

pub fn load_truth_csv(path: impl AsRef<Path>) -> Result<Vec<TruthEdge>, SynthError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_truth_csv(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspond::{count_correspondences, EventIndex};
    use crate::events::extract_events;
    use crate::mle::estimate;

    fn edge(cause: usize, effect: usize, lag: usize, p_c: f64) -> PlantedEdge {
        PlantedEdge { cause, effect, lag, p_c }
    }

    #[test]
    fn pc_zero_gives_independent_streams() {
        let (c, e) = generate_event_pair(0.1, 0.0, 2, 20_000, 5).unwrap();
        let spec = SynthSpec::new(2, 20_000, 0.1, vec![], 5);
        let net = generate_network(&spec).unwrap();
        assert_eq!(c.events(), net.events[0].events());
        assert_eq!(e.events(), net.events[1].events());
    }

    #[test]
    fn pc_one_copies_every_cause_event() {
        let (c, e) = generate_event_pair(0.02, 1.0, 3, 10_000, 1).unwrap();
        for t in 0..10_000 - 3 {
            if c.events()[t] {
                assert!(e.events()[t + 3]);
            }
        }
    }

    #[test]
    fn recovers_planted_probabilities() {
        let (c, e) = generate_event_pair(0.05, 0.4, 3, 52_416, 11).unwrap();
        let counts =
            count_correspondences(&EventIndex::from_series(&c), &EventIndex::from_series(&e), 3, 0).unwrap();
        let est = estimate(&counts).unwrap();
        assert!((est.p_s - 0.05).abs() < 0.03, "{est:?}");
        assert!((est.p_c - 0.4).abs() < 0.03, "{est:?}");
    }

    #[test]
    fn chains_cascade() {
        let spec = SynthSpec::new(3, 5_000, 0.01, vec![edge(0, 1, 1, 1.0), edge(1, 2, 2, 1.0)], 2);
        let net = generate_network(&spec).unwrap();
        let ev: Vec<&[bool]> = net.events.iter().map(|e| e.events()).collect();
        for t in 0..5_000 - 3 {
            if ev[0][t] {
                assert!(ev[1][t + 1] && ev[2][t + 3]);
            }
        }
    }

    #[test]
    fn rejects_bad_edges() {
        let bad = [edge(1, 1, 1, 0.5), edge(0, 5, 1, 0.5), edge(0, 1, 0, 0.5), edge(0, 1, 9, 0.5), edge(0, 1, 1, 1.5)];
        for e in bad {
            let spec = SynthSpec::new(3, 100, 0.1, vec![e], 0);
            assert!(matches!(generate_network(&spec), Err(SynthError::Spec(_))), "{e:?}");
        }
        let spec = SynthSpec::new(3, 100, 0.1, vec![edge(0, 1, 1, 0.5), edge(0, 1, 1, 0.2)], 0);
        assert!(generate_network(&spec).is_err());
    }

    #[test]
    fn random_edges_are_distinct_and_in_range() {
        let mut spec = SynthSpec::new(20, 100, 0.05, vec![], 4);
        spec.random_edges = Some(RandomEdges {
            count: 10,
            p_c_min: 0.3,
            p_c_max: 0.9,
        });
        let edges = spec.resolved_edges().unwrap();
        assert_eq!(edges.len(), 10);
        for (k, e) in edges.iter().enumerate() {
            assert!(e.cause != e.effect && (0.3..=0.9).contains(&e.p_c) && (1..=8).contains(&e.lag));
            assert!(edges[..k].iter().all(|o| (o.cause, o.effect) != (e.cause, e.effect)));
        }
        assert_eq!(edges, spec.resolved_edges().unwrap());
    }

    #[test]
    fn speeds_reproduce_isolated_events() {
        let spec = SynthSpec::new(3, 2016 * 6, 0.02, vec![edge(0, 1, 2, 0.7)], 8);
        let net = generate_network(&spec).unwrap();
        let speeds = net.speed_series().unwrap();
        for (s, ev) in speeds.iter().zip(&net.events) {
            let (derived, _) = extract_events(s, 0.25).unwrap();
            let truth = ev.events();
            for t in 0..truth.len() {
                let isolated = t == 0 || !truth[t - 1];
                if isolated {
                    assert_eq!(derived.events()[t], truth[t], "station {} slot {t}", ev.station_id());
                }
            }
        }
    }

    #[test]
    fn truth_csv_round_trip() {
        let ids = vec!["A".to_string(), "B".to_string()];
        let edges = vec![edge(0, 1, 3, 0.25), edge(1, 0, 1, 0.5)];
        let mut buf = Vec::new();
        write_truth_csv(&ids, &edges, &mut buf).unwrap();
        let back = read_truth_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0], TruthEdge { cause: "A".into(), effect: "B".into(), lag: 3, p_c: Some(0.25) });
        assert_eq!(back[1].lag, 1);
    }

    #[test]
    fn spec_json_defaults() {
        let spec = SynthSpec::from_json(r#"{"n_stations": 4, "n_slots": 100, "p_s": 0.05, "seed": 1}"#.as_bytes()).unwrap();
        assert_eq!(spec.l_max, 8);
        assert!(spec.edges.is_empty());
    }
}
