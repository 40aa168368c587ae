//! Tuple mining over a batch of labelled embeddings.
//!
//! All scans are exhaustive and break ties by the lowest batch index, so the
//! same batch always yields the same tuple.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GeoRecord;
use crate::embedding::{check_same_dim, raw_distance, Embedding, Metric};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MiningError {
    #[error("no sample from a different place than the anchor")]
    NoNegative,
    #[error("anchor is the only sample of its place")]
    NoPositive,
    #[error("anchor has {available} positives, fewer than k = {k}")]
    FewerPositivesThanK { k: usize, available: usize },
    #[error("need {needed} negatives from distinct places, found {available}")]
    NotEnoughNegatives { needed: usize, available: usize },
    #[error("batch contains no same-place pair")]
    NoPositivePair,
    #[error("batch contains no cross-place pair")]
    NoNegativePair,
}

/// A batch of embeddings with place labels, viewed from one anchor.
#[derive(Clone, Copy, Debug)]
pub struct MiningBatch<'a> {
    embeddings: &'a [Embedding],
    place_ids: &'a [String],
    geo: Option<&'a [(f64, f64)]>,
    anchor: usize,
}

impl<'a> MiningBatch<'a> {
    pub fn new(
        embeddings: &'a [Embedding],
        place_ids: &'a [String],
        anchor: usize,
    ) -> Result<Self> {
        if embeddings.len() != place_ids.len() {
            return Err(Error::invalid(format!(
                "{} embeddings but {} place ids",
                embeddings.len(),
                place_ids.len()
            )));
        }
        check_same_dim(embeddings)?;
        if anchor >= embeddings.len() {
            return Err(Error::invalid(format!(
                "anchor index {anchor} out of range for batch of {}",
                embeddings.len()
            )));
        }
        Ok(MiningBatch {
            embeddings,
            place_ids,
            geo: None,
            anchor,
        })
    }

    pub fn with_geo(mut self, geo: &'a [(f64, f64)]) -> Result<Self> {
        if geo.len() != self.embeddings.len() {
            return Err(Error::invalid("geo list length differs from batch length"));
        }
        self.geo = Some(geo);
        Ok(self)
    }

    /// Same batch, different anchor.
    pub fn with_anchor(self, anchor: usize) -> Self {
        assert!(anchor < self.embeddings.len(), "anchor out of range");
        MiningBatch { anchor, ..self }
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn anchor_index(&self) -> usize {
        self.anchor
    }

    pub fn embeddings(&self) -> &'a [Embedding] {
        self.embeddings
    }

    pub fn embedding(&self, i: usize) -> &'a Embedding {
        &self.embeddings[i]
    }

    pub fn place(&self, i: usize) -> &'a str {
        &self.place_ids[i]
    }

    pub fn geo(&self) -> Option<&'a [(f64, f64)]> {
        self.geo
    }

    fn anchor_distance(&self, i: usize, metric: Metric) -> f64 {
        raw_distance(
            self.embeddings[self.anchor].as_slice(),
            self.embeddings[i].as_slice(),
            metric,
        )
    }

    fn is_positive(&self, i: usize) -> bool {
        i != self.anchor && self.place_ids[i] == self.place_ids[self.anchor]
    }

    fn is_negative(&self, i: usize) -> bool {
        self.place_ids[i] != self.place_ids[self.anchor]
    }

    /// Negatives sorted by ascending distance to the anchor, ties by index.
    fn ranked_negatives(&self, metric: Metric) -> Vec<(f64, usize)> {
        let mut ranked: Vec<_> = (0..self.len())
            .filter(|&i| self.is_negative(i))
            .map(|i| (self.anchor_distance(i, metric), i))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ranked
    }
}

/// Index of the different-place sample nearest to the anchor.
pub fn hardest_negative(batch: &MiningBatch<'_>, metric: Metric) -> Result<usize, MiningError> {
    let mut best: Option<(f64, usize)> = None;
    for i in 0..batch.len() {
        if !batch.is_negative(i) {
            continue;
        }
        let d = batch.anchor_distance(i, metric);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i).ok_or(MiningError::NoNegative)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositiveSelection {
    /// Nearest first.
    pub indices: Vec<usize>,
    /// Set when fewer than `k` positives were available.
    pub clamped: bool,
}

/// Up to `k` same-place samples nearest to the anchor, nearest first.
pub fn k_nearest_positives(
    batch: &MiningBatch<'_>,
    k: usize,
    metric: Metric,
) -> Result<PositiveSelection, MiningError> {
    let mut ranked: Vec<_> = (0..batch.len())
        .filter(|&i| batch.is_positive(i))
        .map(|i| (batch.anchor_distance(i, metric), i))
        .collect();
    if ranked.is_empty() {
        return Err(MiningError::NoPositive);
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let clamped = ranked.len() < k;
    Ok(PositiveSelection {
        indices: ranked.into_iter().take(k).map(|(_, i)| i).collect(),
        clamped,
    })
}

/// The hardest negative `n1` and the nearest negative `n2` from a place other
/// than both the anchor's and `n1`'s, so that `d(n1, n2)` is a genuine
/// negative-pair distance.
pub fn two_nearest_negatives(
    batch: &MiningBatch<'_>,
    metric: Metric,
) -> Result<(usize, usize), MiningError> {
    let ranked = batch.ranked_negatives(metric);
    let Some(&(_, n1)) = ranked.first() else {
        return Err(MiningError::NotEnoughNegatives {
            needed: 2,
            available: 0,
        });
    };
    ranked
        .iter()
        .find(|&&(_, i)| batch.place(i) != batch.place(n1))
        .map(|&(_, n2)| (n1, n2))
        .ok_or(MiningError::NotEnoughNegatives {
            needed: 2,
            available: 1,
        })
}

/// Batch-global selections used by MSML: the farthest same-place pair and the
/// nearest cross-place pair, each as `(i, j)` with `i < j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MarginPairs {
    pub positive: (usize, usize),
    pub negative: (usize, usize),
}

pub fn margin_pairs(batch: &MiningBatch<'_>, metric: Metric) -> Result<MarginPairs, MiningError> {
    let mut hardest_pos: Option<(f64, (usize, usize))> = None;
    let mut hardest_neg: Option<(f64, (usize, usize))> = None;
    let emb = batch.embeddings;
    for i in 0..batch.len() {
        for j in i + 1..batch.len() {
            let d = raw_distance(emb[i].as_slice(), emb[j].as_slice(), metric);
            if batch.place(i) == batch.place(j) {
                if hardest_pos.is_none_or(|(bd, _)| d > bd) {
                    hardest_pos = Some((d, (i, j)));
                }
            } else if hardest_neg.is_none_or(|(bd, _)| d < bd) {
                hardest_neg = Some((d, (i, j)));
            }
        }
    }
    Ok(MarginPairs {
        positive: hardest_pos.ok_or(MiningError::NoPositivePair)?.1,
        negative: hardest_neg.ok_or(MiningError::NoNegativePair)?.1,
    })
}

/// What to do when the anchor has fewer than `k` positives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositivePolicy {
    /// Use every available positive.
    #[default]
    Clamp,
    /// Fail with [`MiningError::FewerPositivesThanK`].
    Strict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Triplet,
    Trihard,
    Quad,
    Msml,
}

/// Mined tuple as batch indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tuple {
    PerAnchor {
        anchor: usize,
        positives: Vec<usize>,
        negatives: Vec<usize>,
        clamped: bool,
    },
    Batch(MarginPairs),
}

/// Composes the miners for `strategy`.
///
/// `triplet` pairs the nearest positive with a negative drawn uniformly under
/// `seed`; `trihard` takes the `k` nearest positives and the hardest negative;
/// `quad` adds a second negative (see [`two_nearest_negatives`]); `msml`
/// ignores the anchor and selects batch-global pairs.
pub fn build_tuples(
    batch: &MiningBatch<'_>,
    k: usize,
    strategy: Strategy,
    policy: PositivePolicy,
    seed: u64,
    metric: Metric,
) -> Result<Tuple, MiningError> {
    if strategy == Strategy::Msml {
        return margin_pairs(batch, metric).map(Tuple::Batch);
    }
    let k = if strategy == Strategy::Triplet {
        1
    } else {
        k.max(1)
    };
    let positives = k_nearest_positives(batch, k, metric)?;
    if positives.clamped && policy == PositivePolicy::Strict {
        return Err(MiningError::FewerPositivesThanK {
            k,
            available: positives.indices.len(),
        });
    }
    let negatives = match strategy {
        Strategy::Trihard => vec![hardest_negative(batch, metric)?],
        Strategy::Quad => {
            let (n1, n2) = two_nearest_negatives(batch, metric)?;
            vec![n1, n2]
        }
        Strategy::Triplet => {
            let pool: Vec<usize> = (0..batch.len()).filter(|&i| batch.is_negative(i)).collect();
            if pool.is_empty() {
                return Err(MiningError::NoNegative);
            }
            let mut rng = seed::rng(seed);
            vec![pool[rng.random_range(0..pool.len())]]
        }
        Strategy::Msml => unreachable!(),
    };
    Ok(Tuple::PerAnchor {
        anchor: batch.anchor,
        positives: positives.indices,
        negatives,
        clamped: positives.clamped,
    })
}

/// Radii used to label database items around an anchor position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoNeighborhood {
    pub potential_positive_radius_m: f64,
    pub definite_negative_radius_m: f64,
}

impl Default for GeoNeighborhood {
    fn default() -> Self {
        GeoNeighborhood {
            potential_positive_radius_m: 10.0,
            definite_negative_radius_m: 25.0,
        }
    }
}

impl GeoNeighborhood {
    pub fn validate(&self) -> Result<()> {
        let (p, n) = (
            self.potential_positive_radius_m,
            self.definite_negative_radius_m,
        );
        if !(p.is_finite() && n.is_finite() && p > 0.0 && n > p) {
            return Err(Error::invalid(format!(
                "need 0 < positive radius < negative radius, got {p} and {n}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GeoCandidates {
    pub potential_positives: BTreeSet<String>,
    pub definite_negatives: BTreeSet<String>,
}

/// Labels records by planar distance to `anchor`: within the positive radius
/// is a potential positive, beyond the negative radius a definite negative,
/// and the annulus between is left unlabelled.
pub fn geo_candidates(
    records: &[GeoRecord],
    anchor: &GeoRecord,
    n: &GeoNeighborhood,
) -> Result<GeoCandidates> {
    n.validate()?;
    if !(anchor.x_m.is_finite() && anchor.y_m.is_finite()) {
        return Err(Error::NonFinite("anchor position"));
    }
    let mut out = GeoCandidates::default();
    for r in records {
        if r.id == anchor.id {
            continue;
        }
        if !(r.x_m.is_finite() && r.y_m.is_finite()) {
            return Err(Error::NonFinite("record position"));
        }
        let d = r.geo_distance_m(anchor);
        if d <= n.potential_positive_radius_m {
            out.potential_positives.insert(r.id.clone());
        } else if d > n.definite_negative_radius_m {
            out.definite_negatives.insert(r.id.clone());
        }
    }
    Ok(out)
}
