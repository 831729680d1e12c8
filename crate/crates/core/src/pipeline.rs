//! End-to-end runs: events, correspondence counts, estimates, ground truth,
//! cross-validated classification, and the reports built from a run directory.
//!
//! A run directory holds
//!
//! | file               | content                                              |
//! |--------------------|------------------------------------------------------|
//! | `config.toml`      | the effective configuration                          |
//! | `events.csv`       | per-slot events (optional, `write_events`)           |
//! | `pairs.csv`        | counts and estimates for every swept tuple           |
//! | `labels.csv`       | the labelled dataset                                 |
//! | `scores.csv`       | out-of-fold forest scores of the dataset             |
//! | `roc.csv`          | forest and scalar `p_c` ROC curves                   |
//! | `predictions.csv`  | final-model score of every swept tuple               |
//! | `metrics.json`     | deterministic summary                                |
//! | `timing.json`      | wall time per stage                                  |

use std::collections::{BTreeMap, HashMap};
use std::error::Error as StdError;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{
    cross_validate, pearson, population_std, predict_batch, roc_auc, train_forest, FeatureSet, FeatureVector, ForestParams, RocResult,
};
use crate::correspond::{sweep_counts, CorrespondenceCounts, EventIndex};
use crate::derive_seed;
use crate::events::{extract_events, read_events_csv, write_events_csv, EventSeries};
use crate::groundtruth::{
    build_dataset, label_from_truth, label_pairs, read_labels_csv, write_labels_csv, DatasetSpec, GroundTruth, Label,
    LabelRow, NegativeRatio,
};
use crate::ingest::{align_series, filter_stations, load_drive_times, load_speed_csv, load_station_meta, DriveTimeMatrix, StationMeta};
use crate::mle::{estimate, CausalEstimate, EstimateCase};
use crate::synth::load_truth_csv;

/// Pipeline stage, used to tag errors and timings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Ingest,
    Events,
    Counts,
    Mle,
    GroundTruth,
    Evaluate,
    Predict,
    Output,
    Report,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Events => "events",
            Stage::Counts => "counts",
            Stage::Mle => "mle",
            Stage::GroundTruth => "ground_truth",
            Stage::Evaluate => "evaluate",
            Stage::Predict => "predict",
            Stage::Output => "output",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

type BoxError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Error)]
#[error("[{stage}] {error}")]
pub struct PipelineError {
    pub stage: Stage,
    pub error: BoxError,
}

impl PipelineError {
    pub fn new(stage: Stage, message: impl Into<String>) -> Self {
        Self {
            stage,
            error: message.into().into(),
        }
    }
}

trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<BoxError>> StageExt<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage,
            error: e.into(),
        })
    }
}

/// Everything a run needs. Read from a flat TOML file; command-line flags
/// override individual keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Speed CSV. Either this or `events` is required.
    pub speeds: Option<PathBuf>,
    /// Precomputed `events.csv`, used instead of `speeds`.
    pub events: Option<PathBuf>,
    pub meta: Option<PathBuf>,
    pub drive_times: Option<PathBuf>,
    /// Planted edges (`truth.csv`); replaces the road rules as ground truth.
    pub truth: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub alpha: f64,
    pub tau: usize,
    pub l_max: usize,
    pub min_completeness: f64,
    pub ratio: NegativeRatio,
    pub n_trees: usize,
    pub folds: usize,
    pub seed: u64,
    pub features: FeatureSet,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub max_features: Option<usize>,
    pub propagation_speed_kph: f64,
    pub free_flow_speed_kph: f64,
    pub soft_threshold: usize,
    pub top_k: usize,
    pub write_events: bool,
    /// Worker threads; `None` uses every core. Does not affect results.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ds = DatasetSpec::default();
        let fp = ForestParams::default();
        Self {
            speeds: None,
            events: None,
            meta: None,
            drive_times: None,
            truth: None,
            out_dir: PathBuf::from("run"),
            alpha: 0.25,
            tau: 0,
            l_max: ds.l_max,
            min_completeness: 0.9,
            ratio: ds.ratio,
            n_trees: fp.n_trees,
            folds: 5,
            seed: 0,
            features: FeatureSet::COUNTS,
            max_depth: fp.max_depth,
            min_samples_split: fp.min_samples_split,
            max_features: fp.max_features,
            propagation_speed_kph: ds.propagation_speed_kph,
            free_flow_speed_kph: ds.free_flow_speed_kph,
            soft_threshold: ds.soft_threshold,
            top_k: 20,
            write_events: true,
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).stage(Stage::Config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::new(Stage::Config, format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn forest_params(&self) -> ForestParams {
        ForestParams {
            n_trees: self.n_trees,
            max_depth: self.max_depth,
            min_samples_split: self.min_samples_split,
            max_features: self.max_features,
            bootstrap: true,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            ratio: self.ratio,
            l_max: self.l_max,
            propagation_speed_kph: self.propagation_speed_kph,
            free_flow_speed_kph: self.free_flow_speed_kph,
            soft_threshold: self.soft_threshold,
        }
    }

    /// Range checks, and every referenced input must exist.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::new(Stage::Config, m));
        if self.speeds.is_none() && self.events.is_none() {
            return bad("either `speeds` or `events` must be given".into());
        }
        for (key, path) in [
            ("speeds", &self.speeds),
            ("events", &self.events),
            ("meta", &self.meta),
            ("drive_times", &self.drive_times),
            ("truth", &self.truth),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return bad(format!("{key} file {} does not exist", p.display()));
                }
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.l_max == 0 {
            return bad("l_max must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.min_completeness) {
            return bad(format!("min_completeness {} outside [0, 1]", self.min_completeness));
        }
        if self.folds < 2 {
            return bad("folds must be at least 2".into());
        }
        if self.n_trees == 0 {
            return bad("n_trees must be at least 1".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        self.dataset_spec().validate().stage(Stage::Config)
    }

    /// Run `f` on a pool of `threads` workers, or on the global pool.
    pub fn with_threads<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
        match self.threads {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().stage(Stage::Config)?;
                Ok(pool.install(f))
            }
            None => Ok(f()),
        }
    }
}

/// Counts and estimate for one swept tuple. `cause` and `effect` index the
/// table's station list.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub cause: usize,
    pub effect: usize,
    pub counts: CorrespondenceCounts,
    pub estimate: Option<CausalEstimate>,
}

impl PairRecord {
    pub fn lag(&self) -> usize {
        self.counts.lag
    }

    /// Estimated `p_c` as a feature: undefined estimates map to 0.
    pub fn p_c_feature(&self) -> Option<f64> {
        self.estimate.map(|e| if e.is_defined() { e.p_c } else { 0.0 })
    }
}

/// All swept tuples, ordered by `(cause, effect, lag)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTable {
    pub station_ids: Vec<String>,
    pub records: Vec<PairRecord>,
}

impl PairTable {
    fn index(&self) -> HashMap<(&str, &str, usize), usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(k, r)| {
                (
                    (
                        self.station_ids[r.cause].as_str(),
                        self.station_ids[r.effect].as_str(),
                        r.lag(),
                    ),
                    k,
                )
            })
            .collect()
    }

    pub fn feature(&self, k: usize) -> FeatureVector {
        let r = &self.records[k];
        FeatureVector::new(r.cause, r.effect, &r.counts, r.p_c_feature())
    }

    pub fn case_tally(&self) -> BTreeMap<String, usize> {
        let mut tally: BTreeMap<String, usize> = EstimateCase::ALL.iter().map(|c| (c.to_string(), 0)).collect();
        for r in &self.records {
            if let Some(e) = r.estimate {
                *tally.entry(e.case.to_string()).or_default() += 1;
            }
        }
        tally
    }
}

/// Counts for every ordered pair at lags `1..=l_max`.
pub fn count_table(events: &[EventSeries], l_max: usize, tau: usize) -> Result<PairTable, PipelineError> {
    let indexes: Vec<EventIndex> = events.par_iter().map(EventIndex::from_series).collect();
    let counts = sweep_counts(&indexes, l_max, tau).stage(Stage::Counts)?;
    Ok(PairTable {
        station_ids: events.iter().map(|e| e.station_id().to_string()).collect(),
        records: counts
            .into_iter()
            .map(|p| PairRecord {
                cause: p.cause,
                effect: p.effect,
                counts: p.counts,
                estimate: None,
            })
            .collect(),
    })
}

/// Fill in the estimate of every record.
pub fn estimate_table(table: &mut PairTable) -> Result<(), PipelineError> {
    let ids = &table.station_ids;
    table.records.par_iter_mut().try_for_each(|r| {
        r.estimate = Some(estimate(&r.counts).map_err(|e| {
            PipelineError::new(
                Stage::Mle,
                format!("tuple ({}, {}, {}): {e}", ids[r.cause], ids[r.effect], r.lag()),
            )
        })?);
        Ok(())
    })
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

const PAIR_HEADER: [&str; 14] = [
    "cause", "effect", "lag", "tau", "window", "a00", "a01", "a10", "a11", "p_s", "p_c", "p_c_raw", "log_likelihood",
    "case",
];

/// One row per tuple; estimate columns are empty when not yet estimated
/// (and the probabilities are empty for undefined estimates).
pub fn write_pairs_csv<W: Write>(table: &PairTable, writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PAIR_HEADER)?;
    for r in &table.records {
        let c = &r.counts;
        let mut row = vec![
            table.station_ids[r.cause].clone(),
            table.station_ids[r.effect].clone(),
            c.lag.to_string(),
            c.tau.to_string(),
            c.window.to_string(),
            c.a00.to_string(),
            c.a01.to_string(),
            c.a10.to_string(),
            c.a11.to_string(),
        ];
        match r.estimate {
            Some(e) => row.extend([
                fmt_f64(e.p_s),
                fmt_f64(e.p_c),
                e.p_c_raw.map(fmt_f64).unwrap_or_default(),
                fmt_f64(e.log_likelihood),
                e.case.to_string(),
            ]),
            None => row.extend(std::iter::repeat_n(String::new(), 5)),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_pairs_csv`]. Stations are numbered in order of first
/// appearance; records are sorted by `(cause, effect, lag)`.
pub fn read_pairs_csv<R: Read>(reader: R) -> Result<PairTable, PipelineError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().stage(Stage::Ingest)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PipelineError::new(Stage::Ingest, format!("pairs file lacks column '{name}'")))
    };
    let cols: Vec<usize> = PAIR_HEADER[..9].iter().map(|n| col(n)).collect::<Result<_, _>>()?;
    let est_cols: Vec<Option<usize>> = PAIR_HEADER[9..].iter().map(|n| col(n).ok()).collect();
    let mut ids: Vec<String> = Vec::new();
    let mut id_index: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    for record in rdr.records() {
        let record = record.stage(Stage::Ingest)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let err = |m: String| PipelineError::new(Stage::Ingest, format!("line {line}: {m}"));
        let mut station = |id: &str| {
            *id_index.entry(id.to_string()).or_insert_with(|| {
                ids.push(id.to_string());
                ids.len() - 1
            })
        };
        let cause = station(&record[cols[0]]);
        let effect = station(&record[cols[1]]);
        let int = |k: usize| -> Result<u64, PipelineError> {
            record[cols[k]]
                .parse()
                .map_err(|_| err(format!("bad {} '{}'", PAIR_HEADER[k], &record[cols[k]])))
        };
        let counts = CorrespondenceCounts {
            lag: int(2)? as usize,
            tau: int(3)? as usize,
            window: int(4)?,
            a00: int(5)?,
            a01: int(6)?,
            a10: int(7)?,
            a11: int(8)?,
        };
        if counts.cells().iter().sum::<u64>() != counts.window {
            return Err(err("counts do not sum to the window".into()));
        }
        let field = |k: usize| est_cols[k].map(|c| &record[c]).unwrap_or("");
        let estimate = match field(4) {
            "" => None,
            case => {
                let case: EstimateCase = case.parse().map_err(err)?;
                let num = |k: usize| -> Result<f64, PipelineError> {
                    match field(k) {
                        "" => Ok(f64::NAN),
                        s => s.parse().map_err(|_| err(format!("bad {} '{s}'", PAIR_HEADER[9 + k]))),
                    }
                };
                let raw = num(2)?;
                Some(CausalEstimate {
                    p_s: num(0)?,
                    p_c: num(1)?,
                    p_c_raw: (!raw.is_nan()).then_some(raw),
                    log_likelihood: num(3)?,
                    case,
                })
            }
        };
        records.push(PairRecord {
            cause,
            effect,
            counts,
            estimate,
        });
    }
    records.sort_by_key(|r| (r.cause, r.effect, r.counts.lag));
    Ok(PairTable {
        station_ids: ids,
        records,
    })
}

/// Inputs loaded from the paths in a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Inputs {
    /// Events per station, after completeness filtering when read from speeds.
    pub events: Vec<EventSeries>,
    pub meta: Option<Vec<StationMeta>>,
    pub drive: Option<DriveTimeMatrix>,
    pub truth: Option<Vec<(String, String, usize)>>,
    pub n_slots: usize,
    pub stations_dropped: usize,
}

struct Loaded {
    speeds: Option<Vec<crate::ingest::SpeedSeries>>,
    events: Option<Vec<EventSeries>>,
    meta: Option<Vec<StationMeta>>,
    drive: Option<DriveTimeMatrix>,
    truth: Option<Vec<(String, String, usize)>>,
    stations_dropped: usize,
}

fn load(cfg: &RunConfig) -> Result<Loaded, PipelineError> {
    let meta = cfg.meta.as_ref().map(load_station_meta).transpose().stage(Stage::Ingest)?;
    let drive = cfg.drive_times.as_ref().map(load_drive_times).transpose().stage(Stage::Ingest)?;
    let truth = cfg
        .truth
        .as_ref()
        .map(|p| load_truth_csv(p).map(|edges| edges.into_iter().map(|e| (e.cause, e.effect, e.lag)).collect()))
        .transpose()
        .stage(Stage::Ingest)?;
    let mut stations_dropped = 0;
    let (speeds, events) = if let Some(path) = &cfg.events {
        let file = File::open(path).map_err(|e| PipelineError::new(Stage::Ingest, format!("{}: {e}", path.display())))?;
        (None, Some(read_events_csv(std::io::BufReader::new(file)).stage(Stage::Ingest)?))
    } else {
        let path = cfg.speeds.as_ref().expect("validated");
        let series = align_series(&load_speed_csv(path).stage(Stage::Ingest)?).stage(Stage::Ingest)?;
        let total = series.len();
        let series = match &meta {
            Some(m) => filter_stations(series, m, cfg.min_completeness).stage(Stage::Ingest)?.0,
            None => {
                let mut kept = Vec::new();
                for s in series {
                    if crate::ingest::completeness(&s).stage(Stage::Ingest)? >= cfg.min_completeness {
                        kept.push(s);
                    }
                }
                kept
            }
        };
        stations_dropped = total - series.len();
        if stations_dropped > 0 {
            info!("dropped {stations_dropped} stations below completeness {}", cfg.min_completeness);
        }
        (Some(series), None)
    };
    Ok(Loaded {
        speeds,
        events,
        meta,
        drive,
        truth,
        stations_dropped,
    })
}

fn events_at(loaded: &Loaded, alpha: f64) -> Result<Vec<EventSeries>, PipelineError> {
    match (&loaded.events, &loaded.speeds) {
        (Some(ev), _) => Ok(ev.clone()),
        (None, Some(series)) => series
            .par_iter()
            .map(|s| extract_events(s, alpha).map(|(e, _)| e))
            .collect::<Result<Vec<_>, _>>()
            .stage(Stage::Events),
        (None, None) => Err(PipelineError::new(Stage::Events, "no speed or event input")),
    }
}

/// Load the inputs of `cfg` and derive events at its `alpha`.
pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs, PipelineError> {
    let loaded = load(cfg)?;
    let events = events_at(&loaded, cfg.alpha)?;
    Ok(Inputs {
        n_slots: events.first().map_or(0, |e| e.len()),
        events,
        meta: loaded.meta,
        drive: loaded.drive,
        truth: loaded.truth,
        stations_dropped: loaded.stations_dropped,
    })
}

/// Ground truth over `station_ids`, or the reason it cannot be built.
pub fn ground_truth(
    station_ids: &[String],
    meta: Option<&[StationMeta]>,
    drive: Option<&DriveTimeMatrix>,
    truth: Option<&[(String, String, usize)]>,
    spec: &DatasetSpec,
) -> Result<Result<GroundTruth, String>, PipelineError> {
    let Some(drive) = drive else {
        return Ok(Err("no drive-time matrix".into()));
    };
    if let Some(truth) = truth {
        return label_from_truth(station_ids, drive, truth, spec.l_max)
            .map(Ok)
            .stage(Stage::GroundTruth);
    }
    let Some(meta) = meta else {
        return Ok(Err("no station metadata".into()));
    };
    let by_id: HashMap<&str, &StationMeta> = meta.iter().map(|m| (m.station_id.as_str(), m)).collect();
    let ordered: Vec<StationMeta> = station_ids
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|m| (*m).clone())
                .ok_or_else(|| PipelineError::new(Stage::GroundTruth, format!("station '{id}' has no metadata")))
        })
        .collect::<Result<_, _>>()?;
    label_pairs(&ordered, drive, spec).map(Ok).stage(Stage::GroundTruth)
}

/// Labelled dataset joined against a pair table.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    /// Index into the pair table for every sample.
    pub rows: Vec<usize>,
    pub labels: Vec<bool>,
}

impl LabeledSet {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }
}

/// Attach labels (keyed by station ids) to the tuples of `table`.
pub fn join_labels(table: &PairTable, labels: &[LabelRow]) -> Result<LabeledSet, PipelineError> {
    let index = table.index();
    let mut rows = Vec::with_capacity(labels.len());
    let mut ys = Vec::with_capacity(labels.len());
    for l in labels {
        let k = index
            .get(&(l.cause.as_str(), l.effect.as_str(), l.lag))
            .ok_or_else(|| {
                PipelineError::new(
                    Stage::Evaluate,
                    format!("labelled tuple ({}, {}, {}) is not in the pair table", l.cause, l.effect, l.lag),
                )
            })?;
        rows.push(*k);
        ys.push(l.label == Label::Positive);
    }
    Ok(LabeledSet { rows, labels: ys })
}

fn label_rows(pairs: &[crate::groundtruth::LabeledPair]) -> Vec<LabelRow> {
    pairs
        .iter()
        .map(|p| LabelRow {
            cause: p.cause_id.clone(),
            effect: p.effect_id.clone(),
            lag: p.lag,
            label: p.label,
            rule: Some(p.rule),
            drive_time: Some(p.drive_time),
        })
        .collect()
}

/// Cross-validated forest and scalar-`p_c` results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub positives: usize,
    pub negatives: usize,
    pub features: FeatureSet,
    pub folds: usize,
    pub n_trees: usize,
    pub forest_auc: f64,
    pub forest_auc_std: f64,
    pub forest_fold_aucs: Vec<f64>,
    pub scalar_pc_auc: f64,
    pub scalar_pc_auc_std: f64,
    pub scalar_pc_fold_aucs: Vec<f64>,
}

/// An [`Evaluation`] plus the curves and scores behind it.
#[derive(Debug, Clone)]
pub struct EvaluationDetail {
    pub summary: Evaluation,
    pub forest_roc: RocResult,
    pub scalar_roc: RocResult,
    /// Out-of-fold forest score per sample.
    pub scores: Vec<f64>,
}

/// Cross-validate the forest on `set` and score the scalar `p_c` baseline on
/// the same folds. Undefined estimates score `p_c = 0`.
pub fn evaluate(
    table: &PairTable,
    set: &LabeledSet,
    folds: usize,
    params: &ForestParams,
    features: FeatureSet,
    seed: u64,
) -> Result<EvaluationDetail, PipelineError> {
    let fv: Vec<FeatureVector> = set.rows.iter().map(|&k| table.feature(k)).collect();
    let cv = cross_validate(&fv, &set.labels, folds, params, derive_seed(seed, "cross_validation"), features)
        .stage(Stage::Evaluate)?;
    let pc: Vec<f64> = set
        .rows
        .iter()
        .map(|&k| table.records[k].p_c_feature().unwrap_or(0.0))
        .collect();
    let scalar_roc = roc_auc(&pc, &set.labels).stage(Stage::Evaluate)?;
    let scalar_folds = (0..folds)
        .map(|f| {
            let (s, y): (Vec<f64>, Vec<bool>) = (0..pc.len())
                .filter(|&i| cv.folds[i] == f)
                .map(|i| (pc[i], set.labels[i]))
                .unzip();
            roc_auc(&s, &y).map(|r| r.auc)
        })
        .collect::<Result<Vec<_>, _>>()
        .stage(Stage::Evaluate)?;
    let summary = Evaluation {
        positives: set.positives(),
        negatives: set.negatives(),
        features,
        folds,
        n_trees: params.n_trees,
        forest_auc: cv.roc.auc,
        forest_auc_std: cv.roc.auc_std.unwrap_or_default(),
        forest_fold_aucs: cv.roc.fold_aucs.clone(),
        scalar_pc_auc: scalar_roc.auc,
        scalar_pc_auc_std: population_std(&scalar_folds),
        scalar_pc_fold_aucs: scalar_folds,
    };
    Ok(EvaluationDetail {
        summary,
        forest_roc: cv.roc,
        scalar_roc,
        scores: cv.scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEdge {
    pub cause: String,
    pub effect: String,
    pub lag: usize,
    pub p_c: Option<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRecovery {
    pub cause: String,
    pub effect: String,
    pub lag: usize,
    pub p_c_estimate: Option<f64>,
    pub case: Option<EstimateCase>,
    /// Out-of-fold forest score, when the edge was in the evaluated dataset.
    pub cv_score: Option<f64>,
    /// Final-model score (the edge was a training positive).
    pub score: Option<f64>,
    /// 1-based rank of `score` among all swept tuples (ties share the best rank).
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSummary {
    pub edges: Vec<PlantedRecovery>,
    /// Planted edges ranked within the top `k = |planted|` tuples.
    pub recovered_at_k: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub total: usize,
    pub mean_rate: f64,
    pub min_rate: f64,
    pub max_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub source: String,
    pub candidates: usize,
    pub rule_positives: usize,
    pub rule_negatives: usize,
    pub unlabeled: usize,
    pub ratio: NegativeRatio,
    pub positives: usize,
    pub negatives: usize,
    pub shortfall: usize,
    pub min_negative_drive_time: Option<f64>,
}

/// Parameters echoed into the metrics (no paths, no thread count).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEcho {
    pub alpha: f64,
    pub tau: usize,
    pub l_max: usize,
    pub min_completeness: f64,
    pub ratio: NegativeRatio,
    pub n_trees: usize,
    pub folds: usize,
    pub seed: u64,
    pub features: FeatureSet,
}

impl From<&RunConfig> for ParamEcho {
    fn from(c: &RunConfig) -> Self {
        Self {
            alpha: c.alpha,
            tau: c.tau,
            l_max: c.l_max,
            min_completeness: c.min_completeness,
            ratio: c.ratio,
            n_trees: c.n_trees,
            folds: c.folds,
            seed: c.seed,
            features: c.features,
        }
    }
}

/// The deterministic part of a run's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub params: ParamEcho,
    pub n_stations: usize,
    pub stations_dropped: usize,
    pub n_slots: usize,
    pub n_tuples: usize,
    pub events: EventSummary,
    pub cases: BTreeMap<String, usize>,
    /// Pearson correlation of `A01` and `A10` across all tuples.
    pub a01_a10_correlation: Option<f64>,
    pub dataset: Option<DatasetSummary>,
    pub evaluation: Option<Evaluation>,
    pub evaluation_skipped: Option<String>,
    pub model_fingerprint: Option<String>,
    pub top_edges: Vec<RankedEdge>,
    pub planted: Option<PlantedSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

/// In-memory result of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics: Metrics,
    pub timings: Vec<StageTiming>,
    pub out_dir: PathBuf,
}

struct Timer {
    timings: Vec<StageTiming>,
    last: Instant,
}

impl Timer {
    fn new() -> Self {
        Self {
            timings: Vec::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, stage: Stage) {
        let now = Instant::now();
        self.timings.push(StageTiming {
            stage,
            seconds: (now - self.last).as_secs_f64(),
        });
        self.last = now;
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| PipelineError::new(Stage::Output, format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).stage(Stage::Output)?;
    w.write_all(b"\n").stage(Stage::Output)?;
    w.flush().stage(Stage::Output)
}

fn event_summary(events: &[EventSeries]) -> EventSummary {
    let rates: Vec<f64> = events
        .iter()
        .map(|e| e.count() as f64 / e.len().max(1) as f64)
        .collect();
    EventSummary {
        total: events.iter().map(EventSeries::count).sum(),
        mean_rate: if rates.is_empty() { 0.0 } else { rates.iter().sum::<f64>() / rates.len() as f64 },
        min_rate: rates.iter().copied().fold(f64::INFINITY, f64::min).min(1.0),
        max_rate: rates.iter().copied().fold(0.0, f64::max),
    }
}

fn a01_a10_correlation(table: &PairTable) -> Option<f64> {
    let a01: Vec<f64> = table.records.iter().map(|r| r.counts.a01 as f64).collect();
    let a10: Vec<f64> = table.records.iter().map(|r| r.counts.a10 as f64).collect();
    pearson(&a01, &a10)
}

fn write_roc_csv(path: &Path, curves: &[(&str, &RocResult)]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["model", "threshold", "fpr", "tpr"]).stage(Stage::Output)?;
    for (name, roc) in curves {
        for k in 0..roc.thresholds.len() {
            w.write_record([
                name.to_string(),
                roc.thresholds[k].to_string(),
                roc.fpr[k].to_string(),
                roc.tpr[k].to_string(),
            ])
            .stage(Stage::Output)?;
        }
    }
    w.flush().stage(Stage::Output)
}

fn write_scores_csv(path: &Path, table: &PairTable, set: &LabeledSet, scores: &[f64]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["cause", "effect", "lag", "label", "p_c", "score"]).stage(Stage::Output)?;
    for (i, &k) in set.rows.iter().enumerate() {
        let r = &table.records[k];
        w.write_record([
            table.station_ids[r.cause].clone(),
            table.station_ids[r.effect].clone(),
            r.lag().to_string(),
            if set.labels[i] { "1" } else { "0" }.to_string(),
            r.p_c_feature().map(fmt_f64).unwrap_or_default(),
            scores[i].to_string(),
        ])
        .stage(Stage::Output)?;
    }
    w.flush().stage(Stage::Output)
}

fn write_predictions_csv(path: &Path, table: &PairTable, scores: &[f64]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["cause", "effect", "lag", "p_c", "score"]).stage(Stage::Output)?;
    for (r, s) in table.records.iter().zip(scores) {
        w.write_record([
            table.station_ids[r.cause].clone(),
            table.station_ids[r.effect].clone(),
            r.lag().to_string(),
            r.p_c_feature().map(fmt_f64).unwrap_or_default(),
            s.to_string(),
        ])
        .stage(Stage::Output)?;
    }
    w.flush().stage(Stage::Output)
}

/// Tuple indices by descending score, ties by descending `p_c`, then tuple order.
fn ranking(table: &PairTable, scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].total_cmp(&scores[a]).then_with(|| {
            let pa = table.records[a].p_c_feature().unwrap_or(0.0);
            let pb = table.records[b].p_c_feature().unwrap_or(0.0);
            pb.total_cmp(&pa).then(a.cmp(&b))
        })
    });
    order
}

/// Run every stage and write the run directory.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    cfg.with_threads(|| run_stages(cfg))?
}

fn run_stages(cfg: &RunConfig) -> Result<RunReport, PipelineError> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| PipelineError::new(Stage::Output, format!("{}: {e}", out.display())))?;
    fs::write(out.join("config.toml"), cfg.to_toml()).stage(Stage::Output)?;
    let mut timer = Timer::new();

    let loaded = load(cfg)?;
    timer.lap(Stage::Ingest);

    let events = events_at(&loaded, cfg.alpha)?;
    if events.len() < 2 {
        return Err(PipelineError::new(
            Stage::Events,
            format!("need at least two stations, have {}", events.len()),
        ));
    }
    if cfg.write_events {
        write_events_csv(&events, create(&out.join("events.csv"))?).stage(Stage::Output)?;
    }
    timer.lap(Stage::Events);

    let mut table = count_table(&events, cfg.l_max, cfg.tau)?;
    timer.lap(Stage::Counts);
    estimate_table(&mut table)?;
    write_pairs_csv(&table, create(&out.join("pairs.csv"))?).stage(Stage::Output)?;
    timer.lap(Stage::Mle);

    let spec = cfg.dataset_spec();
    let gt = ground_truth(
        &table.station_ids,
        loaded.meta.as_deref(),
        loaded.drive.as_ref(),
        loaded.truth.as_deref(),
        &spec,
    )?;
    let mut dataset_summary = None;
    let mut labeled = None;
    let mut skipped = None;
    match gt {
        Ok(gt) => {
            let ds = build_dataset(&gt, cfg.ratio);
            write_labels_csv(&ds.pairs, create(&out.join("labels.csv"))?).stage(Stage::Output)?;
            dataset_summary = Some(DatasetSummary {
                source: if loaded.truth.is_some() { "truth_file" } else { "road_rules" }.into(),
                candidates: gt.candidate_count(),
                rule_positives: gt.positives.len(),
                rule_negatives: gt.negatives.len(),
                unlabeled: gt.unlabeled.len(),
                ratio: cfg.ratio,
                positives: ds.n_positive,
                negatives: ds.n_negative,
                shortfall: ds.shortfall,
                min_negative_drive_time: ds.min_negative_drive_time,
            });
            let set = join_labels(&table, &label_rows(&ds.pairs))?;
            if set.positives() < cfg.folds || set.negatives() < cfg.folds {
                skipped = Some(format!(
                    "{} positive and {} negative tuples cannot fill {} folds",
                    set.positives(),
                    set.negatives(),
                    cfg.folds
                ));
            } else {
                labeled = Some(set);
            }
        }
        Err(reason) => skipped = Some(reason),
    }
    timer.lap(Stage::GroundTruth);

    let params = cfg.forest_params();
    let mut evaluation = None;
    let mut fingerprint = None;
    let mut all_scores = None;
    if let Some(set) = &labeled {
        let detail = evaluate(&table, set, cfg.folds, &params, cfg.features, cfg.seed)?;
        write_roc_csv(
            &out.join("roc.csv"),
            &[("forest", &detail.forest_roc), ("scalar_p_c", &detail.scalar_roc)],
        )?;
        write_scores_csv(&out.join("scores.csv"), &table, set, &detail.scores)?;
        timer.lap(Stage::Evaluate);

        let fv: Vec<FeatureVector> = set.rows.iter().map(|&k| table.feature(k)).collect();
        let model = train_forest(&fv, &set.labels, &params, derive_seed(cfg.seed, "final_model"), cfg.features)
            .stage(Stage::Predict)?;
        fingerprint = Some(model.fingerprint());
        let every: Vec<FeatureVector> = (0..table.records.len()).map(|k| table.feature(k)).collect();
        let scores = predict_batch(&model, &every).stage(Stage::Predict)?;
        write_predictions_csv(&out.join("predictions.csv"), &table, &scores)?;
        all_scores = Some((scores, detail.scores.clone()));
        evaluation = Some(detail.summary);
        timer.lap(Stage::Predict);
    } else if let Some(reason) = &skipped {
        warn!("evaluation skipped: {reason}");
    }

    let ids = &table.station_ids;
    let mut top_edges = Vec::new();
    let mut planted = None;
    if let Some((scores, oof)) = &all_scores {
        let order = ranking(&table, scores);
        top_edges = order
            .iter()
            .take(cfg.top_k)
            .map(|&k| {
                let r = &table.records[k];
                RankedEdge {
                    cause: ids[r.cause].clone(),
                    effect: ids[r.effect].clone(),
                    lag: r.lag(),
                    p_c: r.p_c_feature(),
                    score: scores[k],
                }
            })
            .collect();
        if let Some(truth) = &loaded.truth {
            let index = table.index();
            let set = labeled.as_ref().expect("scores imply a dataset");
            let oof_by_row: HashMap<usize, f64> = set.rows.iter().copied().zip(oof.iter().copied()).collect();
            let edges: Vec<PlantedRecovery> = truth
                .iter()
                .map(|(c, e, lag)| {
                    let k = index.get(&(c.as_str(), e.as_str(), *lag)).copied();
                    let score = k.map(|k| scores[k]);
                    PlantedRecovery {
                        cause: c.clone(),
                        effect: e.clone(),
                        lag: *lag,
                        p_c_estimate: k.and_then(|k| table.records[k].p_c_feature()),
                        case: k.and_then(|k| table.records[k].estimate.map(|e| e.case)),
                        cv_score: k.and_then(|k| oof_by_row.get(&k).copied()),
                        score,
                        rank: score.map(|s| scores.iter().filter(|&&o| o > s).count() + 1),
                    }
                })
                .collect();
            let k = edges.len();
            planted = Some(PlantedSummary {
                recovered_at_k: edges.iter().filter(|e| e.rank.is_some_and(|r| r <= k)).count(),
                k,
                edges,
            });
        }
    }

    let metrics = Metrics {
        params: cfg.into(),
        n_stations: events.len(),
        stations_dropped: loaded.stations_dropped,
        n_slots: events[0].len(),
        n_tuples: table.records.len(),
        events: event_summary(&events),
        cases: table.case_tally(),
        a01_a10_correlation: a01_a10_correlation(&table),
        dataset: dataset_summary,
        evaluation,
        evaluation_skipped: skipped,
        model_fingerprint: fingerprint,
        top_edges,
        planted,
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    timer.lap(Stage::Output);
    write_json(&out.join("timing.json"), &timer.timings)?;
    Ok(RunReport {
        metrics,
        timings: timer.timings,
        out_dir: out.clone(),
    })
}

/// One cell of a grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub alpha: f64,
    pub tau: usize,
    /// Cross-validated forest AUC with one negative per positive.
    pub balanced_auc: Option<f64>,
    /// Cross-validated forest AUC with every negative.
    pub full_auc: Option<f64>,
    pub runtime_s: f64,
}

/// Forest AUC over every `(alpha, tau)` combination. The balanced AUC of a
/// cell equals the AUC of [`run_pipeline`] with the same `alpha`, `tau` and
/// a `1:1` ratio. Writes `grid.csv` and `config.toml` into `out_dir`.
pub fn grid_search(
    cfg: &RunConfig,
    alphas: &[f64],
    taus: &[usize],
    include_full: bool,
) -> Result<Vec<GridRow>, PipelineError> {
    if alphas.is_empty() || taus.is_empty() {
        return Err(PipelineError::new(Stage::Config, "grid needs at least one alpha and one tau"));
    }
    cfg.validate()?;
    cfg.with_threads(|| grid_cells(cfg, alphas, taus, include_full))?
}

fn grid_cells(cfg: &RunConfig, alphas: &[f64], taus: &[usize], include_full: bool) -> Result<Vec<GridRow>, PipelineError> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| PipelineError::new(Stage::Output, format!("{}: {e}", out.display())))?;
    fs::write(out.join("config.toml"), cfg.to_toml()).stage(Stage::Output)?;
    let loaded = load(cfg)?;
    let params = cfg.forest_params();
    let mut gt_cache: Option<Result<GroundTruth, String>> = None;
    let mut rows = Vec::new();
    for &alpha in alphas {
        for &tau in taus {
            let started = Instant::now();
            let cell = RunConfig {
                alpha,
                tau,
                ..cfg.clone()
            };
            cell.validate()?;
            let events = events_at(&loaded, alpha)?;
            let mut table = count_table(&events, cfg.l_max, tau)?;
            estimate_table(&mut table)?;
            if gt_cache.is_none() {
                gt_cache = Some(ground_truth(
                    &table.station_ids,
                    loaded.meta.as_deref(),
                    loaded.drive.as_ref(),
                    loaded.truth.as_deref(),
                    &cfg.dataset_spec(),
                )?);
            }
            let auc_at = |ratio: NegativeRatio| -> Result<Option<f64>, PipelineError> {
                let Some(Ok(gt)) = &gt_cache else { return Ok(None) };
                let ds = build_dataset(gt, ratio);
                let set = join_labels(&table, &label_rows(&ds.pairs))?;
                if set.positives() < cfg.folds || set.negatives() < cfg.folds {
                    return Ok(None);
                }
                Ok(Some(evaluate(&table, &set, cfg.folds, &params, cfg.features, cfg.seed)?.summary.forest_auc))
            };
            let balanced_auc = auc_at(NegativeRatio::PerPositive(1))?;
            let full_auc = if include_full { auc_at(NegativeRatio::All)? } else { None };
            let row = GridRow {
                alpha,
                tau,
                balanced_auc,
                full_auc,
                runtime_s: started.elapsed().as_secs_f64(),
            };
            info!("grid cell alpha={alpha} tau={tau}: balanced {balanced_auc:?}, full {full_auc:?}");
            rows.push(row);
        }
    }
    write_grid_csv(&rows, create(&out.join("grid.csv"))?).stage(Stage::Output)?;
    Ok(rows)
}

pub fn write_grid_csv<W: Write>(rows: &[GridRow], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["alpha", "tau", "balanced_auc", "full_auc", "runtime_s"])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.alpha.to_string(),
            r.tau.to_string(),
            opt(r.balanced_auc),
            opt(r.full_auc),
            format!("{:.3}", r.runtime_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid_csv<R: Read>(reader: R) -> Result<Vec<GridRow>, PipelineError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.stage(Stage::Report)?;
        let bad = |field: &str| PipelineError::new(Stage::Report, format!("grid.csv: bad {field}"));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { s.parse().map(Some) };
        rows.push(GridRow {
            alpha: record[0].parse().map_err(|_| bad("alpha"))?,
            tau: record[1].parse().map_err(|_| bad("tau"))?,
            balanced_auc: opt(&record[2]).map_err(|_| bad("balanced_auc"))?,
            full_auc: opt(&record[3]).map_err(|_| bad("full_auc"))?,
            runtime_s: record[4].parse().map_err(|_| bad("runtime_s"))?,
        });
    }
    Ok(rows)
}

/// Read labels from a file and join them to a pair table.
pub fn load_labeled_set(table: &PairTable, labels: impl AsRef<Path>) -> Result<LabeledSet, PipelineError> {
    let path = labels.as_ref();
    let file = File::open(path).map_err(|e| PipelineError::new(Stage::Ingest, format!("{}: {e}", path.display())))?;
    let rows = read_labels_csv(std::io::BufReader::new(file)).stage(Stage::Ingest)?;
    join_labels(table, &rows)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<PairTable, PipelineError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| PipelineError::new(Stage::Ingest, format!("{}: {e}", path.display())))?;
    read_pairs_csv(std::io::BufReader::new(file))
}

fn fmt_auc(auc: f64, std: f64) -> String {
    format!("{auc:.4} ± {std:.4}")
}

/// Human-readable summary of a run directory (single run or grid search).
pub fn report(run_dir: impl AsRef<Path>) -> Result<String, PipelineError> {
    let dir = run_dir.as_ref();
    if !dir.is_dir() {
        return Err(PipelineError::new(Stage::Report, format!("{} is not a directory", dir.display())));
    }
    let mut text = String::new();
    let grid_path = dir.join("grid.csv");
    let is_grid = grid_path.exists() && !dir.join("metrics.json").exists();
    let required: &[&str] = if is_grid {
        &["config.toml", "grid.csv"]
    } else {
        &["config.toml", "pairs.csv", "metrics.json", "timing.json"]
    };
    let mut missing: Vec<&str> = required.iter().copied().filter(|f| !dir.join(f).exists()).collect();
    if !is_grid && missing.is_empty() {
        let metrics = read_metrics(dir)?;
        if metrics.dataset.is_some() && !dir.join("labels.csv").exists() {
            missing.push("labels.csv");
        }
        if metrics.evaluation.is_some() {
            for f in ["roc.csv", "scores.csv", "predictions.csv"] {
                if !dir.join(f).exists() {
                    missing.push(f);
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(PipelineError::new(
            Stage::Report,
            format!("incomplete run directory {}: missing {}", dir.display(), missing.join(", ")),
        ));
    }
    if is_grid {
        let file = File::open(&grid_path).stage(Stage::Report)?;
        let rows = read_grid_csv(file)?;
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        text.push_str("grid search\n");
        text.push_str(&format!(
            "{:>8} {:>4} {:>13} {:>9} {:>10}\n",
            "alpha", "tau", "balanced_auc", "full_auc", "runtime_s"
        ));
        for r in rows {
            text.push_str(&format!(
                "{:>8} {:>4} {:>13} {:>9} {:>10.1}\n",
                r.alpha,
                r.tau,
                opt(r.balanced_auc),
                opt(r.full_auc),
                r.runtime_s
            ));
        }
        return Ok(text);
    }

    let m = read_metrics(dir)?;
    let p = &m.params;
    text.push_str(&format!(
        "run: {} stations ({} dropped), {} slots, {} tuples (alpha {}, tau {}, l_max {}, seed {})\n",
        m.n_stations, m.stations_dropped, m.n_slots, m.n_tuples, p.alpha, p.tau, p.l_max, p.seed
    ));
    text.push_str(&format!(
        "events: {} total, rate mean {:.4} (min {:.4}, max {:.4})\n",
        m.events.total, m.events.mean_rate, m.events.min_rate, m.events.max_rate
    ));
    let cases: Vec<String> = m.cases.iter().map(|(k, v)| format!("{k} {v}")).collect();
    text.push_str(&format!("estimates: {}\n", cases.join(", ")));
    if let Some(r) = m.a01_a10_correlation {
        text.push_str(&format!("corr(A01, A10): {r:.4}\n"));
    }
    if let Some(d) = &m.dataset {
        text.push_str(&format!(
            "ground truth ({}): {} candidates, {} positive; dataset {} positive / {} negative (ratio {})\n",
            d.source, d.candidates, d.rule_positives, d.positives, d.negatives, d.ratio
        ));
    }
    match (&m.evaluation, &m.evaluation_skipped) {
        (Some(e), _) => {
            text.push_str(&format!(
                "forest AUC [{}]: {} over {} folds, {} trees\n",
                e.features,
                fmt_auc(e.forest_auc, e.forest_auc_std),
                e.folds,
                e.n_trees
            ));
            text.push_str(&format!(
                "scalar p_c AUC: {}\n",
                fmt_auc(e.scalar_pc_auc, e.scalar_pc_auc_std)
            ));
        }
        (None, Some(reason)) => text.push_str(&format!("evaluation skipped: {reason}\n")),
        (None, None) => text.push_str("evaluation skipped\n"),
    }
    if !m.top_edges.is_empty() {
        text.push_str(&format!("top {} tuples by forest score:\n", m.top_edges.len()));
        text.push_str(&format!("{:>12} {:>12} {:>4} {:>8} {:>7}\n", "cause", "effect", "lag", "p_c", "score"));
        for e in &m.top_edges {
            let pc = e.p_c.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            text.push_str(&format!("{:>12} {:>12} {:>4} {:>8} {:>7.3}\n", e.cause, e.effect, e.lag, pc, e.score));
        }
    }
    if let Some(pl) = &m.planted {
        text.push_str(&format!(
            "planted edges: {} of {} ranked in the top {}\n",
            pl.recovered_at_k, pl.k, pl.k
        ));
        text.push_str(&format!(
            "{:>12} {:>12} {:>4} {:>8} {:>9} {:>6}\n",
            "cause", "effect", "lag", "p_c_hat", "cv_score", "rank"
        ));
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        for e in &pl.edges {
            text.push_str(&format!(
                "{:>12} {:>12} {:>4} {:>8} {:>9} {:>6}\n",
                e.cause,
                e.effect,
                e.lag,
                opt(e.p_c_estimate),
                opt(e.cv_score),
                e.rank.map(|r| r.to_string()).unwrap_or_else(|| "-".into())
            ));
        }
    }
    Ok(text)
}

pub fn read_metrics(dir: impl AsRef<Path>) -> Result<Metrics, PipelineError> {
    let path = dir.as_ref().join("metrics.json");
    let file = File::open(&path).map_err(|e| PipelineError::new(Stage::Report, format!("{}: {e}", path.display())))?;
    serde_json::from_reader(std::io::BufReader::new(file)).stage(Stage::Report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig {
            speeds: Some("s.csv".into()),
            ratio: NegativeRatio::PerPositive(5),
            features: FeatureSet::ALL,
            threads: Some(2),
            ..RunConfig::default()
        };
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_defaults_and_unknown_keys() {
        let cfg = RunConfig::from_toml("alpha = 0.1\nratio = \"1:100\"\n").unwrap();
        assert_eq!(cfg.alpha, 0.1);
        assert_eq!(cfg.ratio, NegativeRatio::PerPositive(100));
        assert_eq!((cfg.l_max, cfg.n_trees, cfg.folds, cfg.tau), (8, 1000, 5, 0));
        let err = RunConfig::from_toml("alhpa = 0.1\n").unwrap_err();
        assert_eq!(err.stage, Stage::Config);
    }

    #[test]
    fn validation_needs_an_input() {
        let err = RunConfig::default().validate().unwrap_err();
        assert!(err.to_string().starts_with("[config]"));
        let cfg = RunConfig {
            speeds: Some("/nonexistent/speeds.csv".into()),
            ..RunConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("does not exist"));
    }

    #[test]
    fn pairs_csv_round_trip() {
        let events = vec![
            EventSeries::from_events("a", vec![true, false, true, false, false, true, false, false]),
            EventSeries::from_events("b", vec![false, true, false, true, false, false, true, false]),
            EventSeries::from_events("c", vec![false; 8]),
        ];
        let mut table = count_table(&events, 3, 0).unwrap();
        estimate_table(&mut table).unwrap();
        let mut buf = Vec::new();
        write_pairs_csv(&table, &mut buf).unwrap();
        let back = read_pairs_csv(buf.as_slice()).unwrap();
        assert_eq!(back.station_ids, table.station_ids);
        assert_eq!(back.records.len(), table.records.len());
        for (a, b) in back.records.iter().zip(&table.records) {
            assert_eq!(a.counts, b.counts);
            let (ea, eb) = (a.estimate.unwrap(), b.estimate.unwrap());
            assert_eq!(ea.case, eb.case);
            if eb.is_defined() {
                assert_eq!((ea.p_s, ea.p_c, ea.p_c_raw), (eb.p_s, eb.p_c, eb.p_c_raw));
            } else {
                assert!(ea.p_s.is_nan() && ea.p_c.is_nan());
            }
        }
    }

    #[test]
    fn case_tally_lists_every_case() {
        let table = PairTable {
            station_ids: vec![],
            records: vec![],
        };
        assert_eq!(table.case_tally().len(), 4);
    }
}
