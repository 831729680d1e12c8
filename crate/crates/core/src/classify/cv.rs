//! Stratified k-fold cross-validation and feature ablation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forest::{predict_batch, train_forest, ForestParams};
use super::roc::roc_auc;
use super::{ClassifyError, FeatureSet, FeatureVector, RocResult};
use crate::derive_seed;

/// Fold index for every sample. Each class is shuffled and dealt round-robin
/// so every fold gets `floor` or `ceil` of its share of both classes.
pub fn stratified_folds(labels: &[bool], folds: usize, seed: u64) -> Result<Vec<usize>, ClassifyError> {
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if folds < 2 || positives < folds || negatives < folds {
        return Err(ClassifyError::Stratification {
            folds,
            positives,
            negatives,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    for class in [true, false] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for (rank, i) in members.into_iter().enumerate() {
            assignment[i] = rank % folds;
        }
    }
    Ok(assignment)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    /// ROC of the pooled out-of-fold scores, with per-fold AUCs and their spread.
    pub roc: RocResult,
    /// Out-of-fold score of every sample.
    pub scores: Vec<f64>,
    pub folds: Vec<usize>,
}

/// Train on `k - 1` folds, score the held-out fold, repeat for every fold.
pub fn cross_validate(
    features: &[FeatureVector],
    labels: &[bool],
    folds: usize,
    params: &ForestParams,
    seed: u64,
    mask: FeatureSet,
) -> Result<CrossValidation, ClassifyError> {
    if features.len() != labels.len() {
        return Err(ClassifyError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    let assignment = stratified_folds(labels, folds, derive_seed(seed, "folds"))?;
    let mut scores = vec![f64::NAN; labels.len()];
    let mut fold_aucs = Vec::with_capacity(folds);
    for k in 0..folds {
        let (train, test): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| assignment[i] != k);
        let train_x: Vec<FeatureVector> = train.iter().map(|&i| features[i].clone()).collect();
        let train_y: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
        let test_x: Vec<FeatureVector> = test.iter().map(|&i| features[i].clone()).collect();
        let test_y: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
        let model = train_forest(&train_x, &train_y, params, derive_seed(seed, &format!("fold-{k}")), mask)?;
        let fold_scores = predict_batch(&model, &test_x)?;
        fold_aucs.push(roc_auc(&fold_scores, &test_y)?.auc);
        for (&i, s) in test.iter().zip(fold_scores) {
            scores[i] = s;
        }
    }
    let mut roc = roc_auc(&scores, labels)?;
    roc.auc_std = Some(population_std(&fold_aucs));
    roc.fold_aucs = fold_aucs;
    Ok(CrossValidation {
        roc,
        scores,
        folds: assignment,
    })
}

pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub features: FeatureSet,
    pub auc: f64,
    pub auc_std: f64,
}

/// Cross-validated AUC for each of the 15 nonempty subsets of the counts.
/// Every subset uses the same folds and forest seeds.
pub fn feature_ablation(
    features: &[FeatureVector],
    labels: &[bool],
    folds: usize,
    params: &ForestParams,
    seed: u64,
) -> Result<Vec<AblationRow>, ClassifyError> {
    FeatureSet::count_subsets()
        .map(|mask| {
            let cv = cross_validate(features, labels, folds, params, seed, mask)?;
            Ok(AblationRow {
                features: mask,
                auc: cv.roc.auc,
                auc_std: cv.roc.auc_std.unwrap_or_default(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<bool> = (0..103).map(|i| i % 10 == 0).collect();
        let folds = stratified_folds(&labels, 5, 1).unwrap();
        for k in 0..5 {
            let pos = (0..103).filter(|&i| folds[i] == k && labels[i]).count();
            let neg = (0..103).filter(|&i| folds[i] == k && !labels[i]).count();
            assert!((2..=3).contains(&pos), "fold {k}: {pos} positives");
            assert!((18..=19).contains(&neg), "fold {k}: {neg} negatives");
        }
    }

    #[test]
    fn too_few_positives() {
        let labels = [true, false, false, false, false, false];
        assert!(matches!(
            stratified_folds(&labels, 5, 0),
            Err(ClassifyError::Stratification { .. })
        ));
        assert!(stratified_folds(&labels, 1, 0).is_err());
    }

    #[test]
    fn perfectly_predictive_feature() {
        let features: Vec<FeatureVector> = (0..40)
            .map(|i| FeatureVector {
                cause: i,
                effect: i + 1,
                lag: 1,
                counts: [100, (i * 7 % 13) as u64, 5, if i % 4 == 0 { 20 } else { 0 }],
                p_c: None,
            })
            .collect();
        let labels: Vec<bool> = (0..40).map(|i| i % 4 == 0).collect();
        let cv = cross_validate(&features, &labels, 5, &ForestParams::with_trees(25), 3, FeatureSet::COUNTS).unwrap();
        assert_eq!(cv.roc.auc, 1.0);
        assert!(cv.roc.fold_aucs.iter().all(|&a| a == 1.0));
        assert_eq!(cv.roc.auc_std, Some(0.0));
    }

    #[test]
    fn population_std_example() {
        assert_eq!(population_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]), 2.0);
    }
}
