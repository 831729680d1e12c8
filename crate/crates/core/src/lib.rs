//! Event-based causal discovery between road sensors.
//!
//! The pipeline turns per-station speed series into binary slowdown events,
//! counts lagged event correspondences between every ordered station pair,
//! estimates spontaneous and causal event probabilities by constrained
//! maximum likelihood, and scores candidate `(cause, effect, lag)` tuples
//! against rule-derived ground truth with a random forest.
//!
//! Module map:
//!
//! - [`ingest`]: speed CSVs, station metadata, drive-time matrices
//! - [`events`]: median-week profile, slowdown thresholding, leading edges
//! - [`correspond`]: lagged correspondence counts over event index sets
//! - [`mle`]: closed-form and boundary maximum-likelihood estimates
//! - [`groundtruth`]: labelling rules and balanced/ratio'd datasets
//! - [`classify`]: random forest, ROC/AUC, cross-validation, ablation
//! - [`synth`]: synthetic networks with planted causal edges
//! - [`pipeline`]: end-to-end runs, grid search and reports

pub mod classify;
pub mod correspond;
pub mod events;
pub mod groundtruth;
pub mod ingest;
pub mod mle;
pub mod pipeline;
pub mod synth;

pub use correspond::{count_correspondences, CorrespondenceCounts, EventIndex};
pub use events::{EventSeries, WeekProfile};
pub use ingest::{DriveTimeMatrix, SpeedSeries, StationMeta};
pub use mle::{estimate, CausalEstimate, EstimateCase};

/// Seed for one named consumer of randomness, derived from a root seed.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::new()
        .chain_update(root.to_le_bytes())
        .chain_update(label.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
