//! Metric-learning lab for visual geo-localization.
//!
//! The crate implements the quintuplet loss family (sums of hinges over the
//! `k` nearest positives) next to the usual comparators (triplet, quadruplet,
//! TriHard, MSML), the miners that build their tuples, a small MLP embedding
//! network trained with SGD, a synthetic multi-view city generator and a
//! Recall@N evaluator with a geographic correctness radius.

pub mod cli;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod mining;
pub mod seed;
pub mod trainer;

pub use embedding::{
    distance, l2_normalize, pairwise_distances, DistanceMatrix, Embedding, Metric,
};
pub use error::{Error, Result};
pub use losses::{LossKind, LossResult, LossSpec, Margins, Role};
pub use mining::{MiningBatch, MiningError};
