//! Bagged ensembles of [`DecisionTree`]s.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tree::{DecisionTree, TreeParams};
use super::{feature_matrix, ClassifyError, FeatureSet, FeatureVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows every tree until its leaves are pure.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// Features tried per split; `None` means `floor(sqrt(d))`.
    pub max_features: Option<usize>,
    /// Train each tree on a bootstrap resample of the training set.
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 1000,
            max_depth: None,
            min_samples_split: 2,
            max_features: None,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    pub fn with_trees(n_trees: usize) -> Self {
        Self {
            n_trees,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), ClassifyError> {
        if self.n_trees == 0 {
            return Err(ClassifyError::Parameter("n_trees must be at least 1".into()));
        }
        if self.min_samples_split < 2 {
            return Err(ClassifyError::Parameter("min_samples_split must be at least 2".into()));
        }
        if self.max_features == Some(0) {
            return Err(ClassifyError::Parameter("max_features must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    pub n_trees: usize,
    pub seed: u64,
    pub feature_mask: FeatureSet,
    pub params: ForestParams,
}

impl ForestModel {
    /// SHA-256 of the serialized model, as hex.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("forest serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fraction of trees voting positive on an already-selected feature row.
    pub fn vote_fraction(&self, row: &[f64]) -> f64 {
        let votes = self.trees.iter().filter(|t| t.vote(row)).count();
        votes as f64 / self.trees.len() as f64
    }
}

/// Train a random forest. Tree `k` draws from its own ChaCha8 stream
/// `(seed, k)`, so the model does not depend on the thread count.
pub fn train_forest(
    features: &[FeatureVector],
    labels: &[bool],
    params: &ForestParams,
    seed: u64,
    mask: FeatureSet,
) -> Result<ForestModel, ClassifyError> {
    params.validate()?;
    if features.len() != labels.len() {
        return Err(ClassifyError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if mask.is_empty() {
        return Err(ClassifyError::EmptyFeatureSet);
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(ClassifyError::SingleClass { positives, negatives });
    }
    let x = feature_matrix(features, mask)?;
    let d = mask.len();
    let tree_params = TreeParams {
        max_depth: params.max_depth,
        min_samples_split: params.min_samples_split,
        max_features: params
            .max_features
            .unwrap_or_else(|| ((d as f64).sqrt().floor() as usize).max(1))
            .min(d),
    };
    let n = x.len();
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let samples = if params.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            DecisionTree::fit(&x, labels, samples, tree_params, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        trees,
        n_trees: params.n_trees,
        seed,
        feature_mask: mask,
        params: params.clone(),
    })
}

/// Fraction of trees voting positive.
pub fn predict_proba(model: &ForestModel, feature: &FeatureVector) -> Result<f64, ClassifyError> {
    let row = feature.select(model.feature_mask)?;
    Ok(model.vote_fraction(&row))
}

/// [`predict_proba`] over many samples, in parallel.
pub fn predict_batch(model: &ForestModel, features: &[FeatureVector]) -> Result<Vec<f64>, ClassifyError> {
    features.par_iter().map(|f| predict_proba(model, f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(counts: [u64; 4], p_c: Option<f64>) -> FeatureVector {
        FeatureVector {
            cause: 0,
            effect: 1,
            lag: 1,
            counts,
            p_c,
        }
    }

    #[test]
    fn two_separable_points() {
        let f = vec![fv([10, 0, 0, 0], None), fv([0, 0, 0, 10], None)];
        let y = vec![false, true];
        let model = train_forest(&f, &y, &ForestParams::with_trees(1), 3, FeatureSet::COUNTS).unwrap();
        // a bootstrap of two points may draw only one class
        let p: Vec<f64> = f.iter().map(|v| predict_proba(&model, v).unwrap()).collect();
        let no_bootstrap = ForestParams {
            bootstrap: false,
            ..ForestParams::with_trees(1)
        };
        let exact = train_forest(&f, &y, &no_bootstrap, 3, FeatureSet::COUNTS).unwrap();
        assert_eq!(predict_proba(&exact, &f[0]).unwrap(), 0.0);
        assert_eq!(predict_proba(&exact, &f[1]).unwrap(), 1.0);
        assert!(p.iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn same_seed_same_fingerprint() {
        let f: Vec<FeatureVector> = (0..30).map(|i| fv([i, 30 - i, i % 4, i % 3], None)).collect();
        let y: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        let a = train_forest(&f, &y, &ForestParams::with_trees(20), 9, FeatureSet::COUNTS).unwrap();
        let b = train_forest(&f, &y, &ForestParams::with_trees(20), 9, FeatureSet::COUNTS).unwrap();
        let c = train_forest(&f, &y, &ForestParams::with_trees(20), 10, FeatureSet::COUNTS).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn vote_fractions() {
        let f = vec![fv([10, 0, 0, 0], None), fv([0, 0, 0, 10], None)];
        let y = vec![false, true];
        let p = ForestParams {
            bootstrap: false,
            ..ForestParams::with_trees(1)
        };
        let pos = train_forest(&f, &y, &p, 0, FeatureSet::A11).unwrap();
        let neg = train_forest(&f, &[true, false], &p, 0, FeatureSet::A11).unwrap();
        let mut split = pos.clone();
        split.trees.push(neg.trees[0].clone());
        assert_eq!(split.vote_fraction(&[10.0]), 0.5);
        let mut all = pos.clone();
        all.trees.push(pos.trees[0].clone());
        assert_eq!(all.vote_fraction(&[10.0]), 1.0);
    }

    #[test]
    fn errors() {
        let f = vec![fv([1, 0, 0, 0], None), fv([0, 1, 0, 0], None)];
        assert!(matches!(
            train_forest(&f, &[true, true], &ForestParams::with_trees(1), 0, FeatureSet::COUNTS),
            Err(ClassifyError::SingleClass { .. })
        ));
        assert!(matches!(
            train_forest(&f, &[true, false], &ForestParams::with_trees(1), 0, FeatureSet::ALL),
            Err(ClassifyError::MaskMismatch { .. })
        ));
        assert!(matches!(
            train_forest(&f, &[true, false], &ForestParams::with_trees(0), 0, FeatureSet::COUNTS),
            Err(ClassifyError::Parameter(_))
        ));
        let model = train_forest(&f, &[true, false], &ForestParams::with_trees(3), 0, FeatureSet::COUNTS).unwrap();
        let with_pc = ForestModel {
            feature_mask: FeatureSet::ALL,
            ..model
        };
        assert!(predict_proba(&with_pc, &f[0]).is_err());
    }
}
