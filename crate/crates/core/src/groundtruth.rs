//! Rule-derived ground truth over candidate `(cause, effect, lag)` tuples.
//!
//! A tuple is positive when both stations share road and direction, the
//! cause lies downstream of the effect (so its slowdowns travel upstream to
//! the effect), and the lag matches the expected propagation time from the
//! effect to the cause. Every other tuple is a negative candidate, ranked by
//! drive time from cause to effect so that datasets can take the farthest
//! (least plausibly causal) pairs first.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{DriveTimeMatrix, StationMeta};

#[derive(Debug, Error)]
pub enum GroundTruthError {
    #[error("station '{0}' is missing from the drive-time matrix")]
    MissingStation(String),
    #[error("invalid dataset parameters: {0}")]
    Spec(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which way traffic runs between two stations, judged from drive times.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowDirection {
    /// `D_ij < D_ji`: traffic flows from `i` to `j`; events at `j` propagate to `i`.
    FlowsIToJ,
    /// `D_ij > D_ji`.
    FlowsJToI,
    Ambiguous,
}

pub fn flow_direction(i: usize, j: usize, drive: &DriveTimeMatrix) -> FlowDirection {
    let (ij, ji) = (drive.minutes(i, j), drive.minutes(j, i));
    if ij < ji {
        FlowDirection::FlowsIToJ
    } else if ij > ji {
        FlowDirection::FlowsJToI
    } else {
        FlowDirection::Ambiguous
    }
}

/// How many negatives to draw per positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NegativeRatio {
    PerPositive(u32),
    /// Every non-positive tuple.
    All,
}

impl FromStr for NegativeRatio {
    type Err = String;

    /// Accepts `k`, `1:k` or `all`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") || s.eq_ignore_ascii_case("full") {
            return Ok(NegativeRatio::All);
        }
        let k = match s.split_once(':') {
            Some(("1", k)) => k,
            Some(_) => return Err(format!("ratio '{s}' must have the form 1:k")),
            None => s,
        };
        match k.trim().parse::<u32>() {
            Ok(k) if k >= 1 => Ok(NegativeRatio::PerPositive(k)),
            _ => Err(format!("bad negative ratio '{s}'")),
        }
    }
}

impl TryFrom<String> for NegativeRatio {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<NegativeRatio> for String {
    fn from(r: NegativeRatio) -> Self {
        r.to_string()
    }
}

impl fmt::Display for NegativeRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NegativeRatio::PerPositive(k) => write!(f, "1:{k}"),
            NegativeRatio::All => f.write_str("all"),
        }
    }
}

/// Parameters of the labelling rules.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub ratio: NegativeRatio,
    pub l_max: usize,
    /// Upper bound on the upstream propagation speed of congestion.
    pub propagation_speed_kph: f64,
    /// Converts free-flow drive time into distance.
    pub free_flow_speed_kph: f64,
    /// Extra lags accepted above the base lag.
    pub soft_threshold: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            ratio: NegativeRatio::PerPositive(1),
            l_max: 8,
            propagation_speed_kph: 20.0,
            free_flow_speed_kph: 100.0,
            soft_threshold: 1,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), GroundTruthError> {
        if self.l_max < 1 {
            return Err(GroundTruthError::Spec("l_max must be at least 1".into()));
        }
        for (name, v) in [
            ("propagation_speed_kph", self.propagation_speed_kph),
            ("free_flow_speed_kph", self.free_flow_speed_kph),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GroundTruthError::Spec(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Lags (in 5-minute slots) at which a slowdown is expected to have
/// travelled `drive_minutes` of free-flow road upstream. Sorted; empty when
/// the base lag exceeds `l_max`.
pub fn expected_lags(drive_minutes: f64, spec: &DatasetSpec) -> Vec<usize> {
    let distance_km = drive_minutes * spec.free_flow_speed_kph / 60.0;
    let propagation_minutes = distance_km / spec.propagation_speed_kph * 60.0;
    // round half up
    let base = (propagation_minutes / 5.0 + 0.5).floor() as usize;
    if base > spec.l_max {
        return Vec::new();
    }
    (base..=base + spec.soft_threshold)
        .filter(|&lag| (1..=spec.l_max).contains(&lag))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        })
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" | "1" => Ok(Label::Positive),
            "negative" | "0" => Ok(Label::Negative),
            _ => Err(format!("unknown label '{s}'")),
        }
    }
}

/// The rule that decided a tuple's status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Same road and direction, cause downstream, lag within the expected set.
    UpstreamPropagation,
    /// Listed in a planted-truth file.
    Planted,
    DifferentRoadOrDirection,
    /// Same road and direction with correct flow, but the lag is not expected.
    LagOutsideExpected,
    /// Same road and direction with correct flow, but too far for any lag.
    OutOfReach,
    /// Cause is upstream of the effect.
    DownstreamPropagation,
    /// Equal drive times both ways.
    AmbiguousFlow,
    /// Not listed in a planted-truth file.
    NotPlanted,
}

impl Rule {
    const ALL: [Rule; 8] = [
        Rule::UpstreamPropagation,
        Rule::Planted,
        Rule::DifferentRoadOrDirection,
        Rule::LagOutsideExpected,
        Rule::OutOfReach,
        Rule::DownstreamPropagation,
        Rule::AmbiguousFlow,
        Rule::NotPlanted,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Rule::UpstreamPropagation => "upstream_propagation",
            Rule::Planted => "planted",
            Rule::DifferentRoadOrDirection => "different_road_or_direction",
            Rule::LagOutsideExpected => "lag_outside_expected",
            Rule::OutOfReach => "out_of_reach",
            Rule::DownstreamPropagation => "downstream_propagation",
            Rule::AmbiguousFlow => "ambiguous_flow",
            Rule::NotPlanted => "not_planted",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Rule::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown rule '{s}'"))
    }
}

/// A candidate tuple with its label. `cause` and `effect` index the
/// station list the labels were built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub cause: usize,
    pub effect: usize,
    pub cause_id: String,
    pub effect_id: String,
    pub lag: usize,
    pub label: Label,
    pub rule: Rule,
    /// Drive time from cause to effect, minutes.
    pub drive_time: f64,
}

/// Output of the labelling rules.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub positives: Vec<LabeledPair>,
    /// Tuples a rule labels negative outright.
    pub negatives: Vec<LabeledPair>,
    /// Tuples no rule decides (labelled negative only if drawn into a dataset).
    pub unlabeled: Vec<LabeledPair>,
}

impl GroundTruth {
    pub fn candidate_count(&self) -> usize {
        self.positives.len() + self.negatives.len() + self.unlabeled.len()
    }

    /// Every non-positive tuple, farthest drive time first. Ties keep
    /// `(cause, effect, lag)` order.
    pub fn ranked_negatives(&self) -> Vec<LabeledPair> {
        let mut all: Vec<LabeledPair> = self
            .negatives
            .iter()
            .chain(&self.unlabeled)
            .cloned()
            .map(|mut p| {
                p.label = Label::Negative;
                p
            })
            .collect();
        all.sort_by(|a, b| {
            b.drive_time
                .total_cmp(&a.drive_time)
                .then((a.cause, a.effect, a.lag).cmp(&(b.cause, b.effect, b.lag)))
        });
        all
    }
}

fn tuple(
    ids: &[String],
    drive: &DriveTimeMatrix,
    cause: usize,
    effect: usize,
    lag: usize,
    label: Label,
    rule: Rule,
) -> LabeledPair {
    LabeledPair {
        cause,
        effect,
        cause_id: ids[cause].clone(),
        effect_id: ids[effect].clone(),
        lag,
        label,
        rule,
        drive_time: drive.minutes(cause, effect),
    }
}

/// Apply the labelling rules to every ordered station pair at lags
/// `1..=l_max`. Station indices in the output follow `stations`.
///
/// Stations without a road designator are skipped with a warning.
pub fn label_pairs(
    stations: &[StationMeta],
    drive: &DriveTimeMatrix,
    spec: &DatasetSpec,
) -> Result<GroundTruth, GroundTruthError> {
    spec.validate()?;
    let ids: Vec<String> = stations.iter().map(|s| s.station_id.clone()).collect();
    let drive = drive
        .subset(&ids)
        .map_err(|_| {
            let missing = ids.iter().find(|id| drive.index_of(id).is_none()).cloned().unwrap_or_default();
            GroundTruthError::MissingStation(missing)
        })?;
    let usable: Vec<usize> = (0..stations.len())
        .filter(|&i| {
            let ok = !stations[i].road.trim().is_empty();
            if !ok {
                warn!("station '{}' has no road designator; excluded from ground truth", stations[i].station_id);
            }
            ok
        })
        .collect();

    let mut gt = GroundTruth::default();
    for &cause in &usable {
        for &effect in &usable {
            if cause == effect {
                continue;
            }
            let (c, e) = (&stations[cause], &stations[effect]);
            let same_road = c.road == e.road && c.direction == e.direction;
            let expected = if same_road {
                match flow_direction(effect, cause, &drive) {
                    // traffic runs effect -> cause, so cause events travel back to effect
                    FlowDirection::FlowsIToJ => Some(expected_lags(drive.minutes(effect, cause), spec)),
                    FlowDirection::FlowsJToI => None,
                    FlowDirection::Ambiguous => None,
                }
            } else {
                None
            };
            // lag 0 is never a candidate: propagation is not instantaneous
            for lag in 1..=spec.l_max {
                let (label, rule) = if !same_road {
                    (Some(Label::Negative), Rule::DifferentRoadOrDirection)
                } else {
                    match (&expected, flow_direction(effect, cause, &drive)) {
                        (Some(lags), _) if lags.contains(&lag) => (Some(Label::Positive), Rule::UpstreamPropagation),
                        (Some(lags), _) if lags.is_empty() => (Some(Label::Negative), Rule::OutOfReach),
                        (Some(_), _) => (Some(Label::Negative), Rule::LagOutsideExpected),
                        (None, FlowDirection::Ambiguous) => (None, Rule::AmbiguousFlow),
                        (None, _) => (None, Rule::DownstreamPropagation),
                    }
                };
                let bucket = match label {
                    Some(Label::Positive) => &mut gt.positives,
                    Some(Label::Negative) => &mut gt.negatives,
                    None => &mut gt.unlabeled,
                };
                bucket.push(tuple(&ids, &drive, cause, effect, lag, label.unwrap_or(Label::Negative), rule));
            }
        }
    }
    let by_drive_desc = |a: &LabeledPair, b: &LabeledPair| {
        b.drive_time
            .total_cmp(&a.drive_time)
            .then((a.cause, a.effect, a.lag).cmp(&(b.cause, b.effect, b.lag)))
    };
    gt.unlabeled.sort_by(by_drive_desc);
    gt.negatives.sort_by(by_drive_desc);
    Ok(gt)
}

/// Ground truth from a list of planted `(cause, effect, lag)` edges: those
/// are the positives and every other tuple is an undecided negative candidate.
pub fn label_from_truth(
    ids: &[String],
    drive: &DriveTimeMatrix,
    planted: &[(String, String, usize)],
    l_max: usize,
) -> Result<GroundTruth, GroundTruthError> {
    let drive = drive.subset(ids).map_err(|_| {
        let missing = ids.iter().find(|id| drive.index_of(id).is_none()).cloned().unwrap_or_default();
        GroundTruthError::MissingStation(missing)
    })?;
    let planted: HashSet<(&str, &str, usize)> = planted.iter().map(|(c, e, l)| (c.as_str(), e.as_str(), *l)).collect();
    let mut gt = GroundTruth::default();
    for cause in 0..ids.len() {
        for effect in 0..ids.len() {
            if cause == effect {
                continue;
            }
            for lag in 1..=l_max {
                let key = (ids[cause].as_str(), ids[effect].as_str(), lag);
                if planted.contains(&key) {
                    gt.positives.push(tuple(ids, &drive, cause, effect, lag, Label::Positive, Rule::Planted));
                } else {
                    gt.unlabeled.push(tuple(ids, &drive, cause, effect, lag, Label::Negative, Rule::NotPlanted));
                }
            }
        }
    }
    gt.unlabeled.sort_by(|a, b| {
        b.drive_time
            .total_cmp(&a.drive_time)
            .then((a.cause, a.effect, a.lag).cmp(&(b.cause, b.effect, b.lag)))
    });
    Ok(gt)
}

/// Positives plus the farthest negatives.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<LabeledPair>,
    pub n_positive: usize,
    pub n_negative: usize,
    /// Smallest drive time among the selected negatives.
    pub min_negative_drive_time: Option<f64>,
    /// Negatives requested but not available.
    pub shortfall: usize,
}

/// All positives followed by the top `ratio * |positives|` negatives by
/// descending drive time (or all of them for [`NegativeRatio::All`]).
pub fn build_dataset(gt: &GroundTruth, ratio: NegativeRatio) -> Dataset {
    let ranked = gt.ranked_negatives();
    let wanted = match ratio {
        NegativeRatio::PerPositive(k) => gt.positives.len() * k as usize,
        NegativeRatio::All => ranked.len(),
    };
    let take = wanted.min(ranked.len());
    let shortfall = wanted - take;
    if shortfall > 0 {
        warn!("requested {wanted} negatives but only {} are available", ranked.len());
    }
    let negatives = &ranked[..take];
    let min_negative_drive_time = negatives.last().map(|p| p.drive_time);
    let mut pairs = gt.positives.clone();
    pairs.extend_from_slice(negatives);
    Dataset {
        n_positive: gt.positives.len(),
        n_negative: take,
        pairs,
        min_negative_drive_time,
        shortfall,
    }
}

/// `cause,effect,lag,label,rule,drive_time` rows.
pub fn write_labels_csv<W: Write>(pairs: &[LabeledPair], writer: W) -> Result<(), GroundTruthError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["cause", "effect", "lag", "label", "rule", "drive_time"])?;
    for p in pairs {
        w.write_record([
            p.cause_id.clone(),
            p.effect_id.clone(),
            p.lag.to_string(),
            p.label.to_string(),
            p.rule.to_string(),
            p.drive_time.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a labels file, keyed by station ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub cause: String,
    pub effect: String,
    pub lag: usize,
    pub label: Label,
    pub rule: Option<Rule>,
    pub drive_time: Option<f64>,
}

pub fn read_labels_csv<R: Read>(reader: R) -> Result<Vec<LabelRow>, GroundTruthError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ci), Some(ei), Some(li), Some(bi)) = (col("cause"), col("effect"), col("lag"), col("label")) else {
        return Err(GroundTruthError::Parse {
            line: 1,
            message: "labels need cause, effect, lag and label columns".into(),
        });
    };
    let (ri, di) = (col("rule"), col("drive_time"));
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let err = |message: String| GroundTruthError::Parse { line, message };
        let lag = record[li].parse().map_err(|_| err(format!("bad lag '{}'", &record[li])))?;
        let label = record[bi].parse().map_err(err)?;
        let rule = match ri.map(|i| &record[i]) {
            Some(s) if !s.is_empty() => Some(s.parse().map_err(|m: String| GroundTruthError::Parse { line, message: m })?),
            _ => None,
        };
        let drive_time = match di.map(|i| &record[i]) {
            Some(s) if !s.is_empty() => Some(s.parse().map_err(|_| GroundTruthError::Parse {
                line,
                message: format!("bad drive_time '{s}'"),
            })?),
            _ => None,
        };
        let row = LabelRow {
            cause: record[ci].to_string(),
            effect: record[ei].to_string(),
            lag,
            label,
            rule,
            drive_time,
        };
        if seen.insert((row.cause.clone(), row.effect.clone(), row.lag), ()).is_some() {
            return Err(GroundTruthError::Parse {
                line,
                message: format!("duplicate tuple ({}, {}, {})", row.cause, row.effect, row.lag),
            });
        }
        out.push(row);
    }
    Ok(out)
}
