//! Random-forest and scalar-threshold classification of candidate tuples.
//!
//! Features are the four correspondence counts and, optionally, the
//! estimated `p_c`. A [`FeatureSet`] picks which of them a model sees.

mod cv;
mod forest;
mod roc;
mod tree;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cv::{cross_validate, feature_ablation, population_std, stratified_folds, AblationRow, CrossValidation};
pub use forest::{predict_batch, predict_proba, train_forest, ForestModel, ForestParams};
pub use roc::{roc_auc, scalar_threshold_auc, RocResult};
pub use tree::DecisionTree;

use crate::correspond::CorrespondenceCounts;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifyError {
    #[error("training set needs at least one sample of each class (got {positives} positive, {negatives} negative)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("AUC is undefined without both classes (got {positives} positive, {negatives} negative)")]
    UndefinedAuc { positives: usize, negatives: usize },
    #[error("cannot build {folds} stratified folds from {positives} positive and {negatives} negative samples")]
    Stratification { folds: usize, positives: usize, negatives: usize },
    #[error("model was trained on {model} but the sample provides {sample}")]
    MaskMismatch { model: FeatureSet, sample: FeatureSet },
    #[error("feature set is empty")]
    EmptyFeatureSet,
    #[error("non-finite feature or score at sample {0}")]
    NonFinite(usize),
    #[error("{features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// A subset of `{A00, A01, A10, A11, p_c}` as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FeatureSet(u8);

impl FeatureSet {
    pub const A00: FeatureSet = FeatureSet(1);
    pub const A01: FeatureSet = FeatureSet(2);
    pub const A10: FeatureSet = FeatureSet(4);
    pub const A11: FeatureSet = FeatureSet(8);
    pub const PC: FeatureSet = FeatureSet(16);
    pub const COUNTS: FeatureSet = FeatureSet(15);
    pub const ALL: FeatureSet = FeatureSet(31);

    const NAMES: [&'static str; 5] = ["a00", "a01", "a10", "a11", "p_c"];

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits != 0 && bits & !Self::ALL.0 == 0).then_some(FeatureSet(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, other: FeatureSet) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn union(self, other: FeatureSet) -> FeatureSet {
        FeatureSet(self.0 | other.0)
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Indices into `[a00, a01, a10, a11, p_c]` of the selected features.
    pub fn indices(self) -> impl Iterator<Item = usize> {
        (0..5).filter(move |i| self.0 & (1 << i) != 0)
    }

    pub fn names(self) -> Vec<&'static str> {
        self.indices().map(|i| Self::NAMES[i]).collect()
    }

    /// The 15 nonempty subsets of the four counts, in bit order.
    pub fn count_subsets() -> impl Iterator<Item = FeatureSet> {
        (1..16u8).map(FeatureSet)
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join(","))
    }
}

impl FromStr for FeatureSet {
    type Err = String;

    /// Comma-separated names (`a00,a01,p_c`), or `counts` / `all`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut bits = 0u8;
        for part in s.split(',').map(|p| p.trim().to_ascii_lowercase()) {
            bits |= match part.as_str() {
                "counts" => Self::COUNTS.0,
                "all" => Self::ALL.0,
                "pc" => Self::PC.0,
                name => match Self::NAMES.iter().position(|&n| n == name) {
                    Some(i) => 1 << i,
                    None => return Err(format!("unknown feature '{part}'")),
                },
            };
        }
        FeatureSet::from_bits(bits).ok_or_else(|| "feature set is empty".to_string())
    }
}

impl TryFrom<String> for FeatureSet {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<FeatureSet> for String {
    fn from(f: FeatureSet) -> Self {
        f.to_string()
    }
}

/// Features of one `(cause, effect, lag)` tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub cause: usize,
    pub effect: usize,
    pub lag: usize,
    /// `[a00, a01, a10, a11]`.
    pub counts: [u64; 4],
    pub p_c: Option<f64>,
}

impl FeatureVector {
    pub fn new(cause: usize, effect: usize, counts: &CorrespondenceCounts, p_c: Option<f64>) -> Self {
        Self {
            cause,
            effect,
            lag: counts.lag,
            counts: counts.cells(),
            p_c,
        }
    }

    /// Features this vector can supply.
    pub fn available(&self) -> FeatureSet {
        if self.p_c.is_some() {
            FeatureSet::ALL
        } else {
            FeatureSet::COUNTS
        }
    }

    /// The selected features in `[a00, a01, a10, a11, p_c]` order.
    pub fn select(&self, set: FeatureSet) -> Result<Vec<f64>, ClassifyError> {
        if !self.available().contains(set) {
            return Err(ClassifyError::MaskMismatch {
                model: set,
                sample: self.available(),
            });
        }
        Ok(set
            .indices()
            .map(|i| match i {
                4 => self.p_c.unwrap_or_default(),
                i => self.counts[i] as f64,
            })
            .collect())
    }
}

/// Selected feature rows, checked to be finite.
pub(crate) fn feature_matrix(features: &[FeatureVector], set: FeatureSet) -> Result<Vec<Vec<f64>>, ClassifyError> {
    features
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let row = f.select(set)?;
            if row.iter().all(|v| v.is_finite()) {
                Ok(row)
            } else {
                Err(ClassifyError::NonFinite(k))
            }
        })
        .collect()
}

/// Pearson correlation, or `None` when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
