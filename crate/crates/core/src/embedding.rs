//! Dense vector numerics shared by the rest of the crate: the [`Embedding`]
//! newtype, the two supported distances and batched distance matrices.
//!
//! Sums always run in ascending index order, so every distance is
//! bit-reproducible and `distance(a, b) == distance(b, a)` holds exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as degenerate by [`l2_normalize`].
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `Σ (aᵢ − bᵢ)²`. The default everywhere.
    #[default]
    SquaredL2,
    /// Euclidean distance, the square root of [`Metric::SquaredL2`].
    L2,
}

/// A finite real vector of fixed dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(Embedding(values))
    }

    /// Wraps values already known to be finite and nonempty.
    pub(crate) fn from_trusted(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty() && values.iter().all(|v| v.is_finite()));
        Embedding(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Distance without validation. Callers guarantee equal lengths.
#[inline]
pub(crate) fn raw_distance(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        sum += d * d;
    }
    match metric {
        Metric::SquaredL2 => sum,
        Metric::L2 => sum.sqrt(),
    }
}

/// Gradient of `raw_distance(a, b)` with respect to `a`, added into `out`
/// scaled by `scale`. The gradient with respect to `b` is the negation.
/// For [`Metric::L2`] the gradient at zero distance is taken as zero.
pub(crate) fn add_distance_grad(a: &[f64], b: &[f64], metric: Metric, scale: f64, out: &mut [f64]) {
    match metric {
        Metric::SquaredL2 => {
            for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                *o += scale * 2.0 * (x - y);
            }
        }
        Metric::L2 => {
            let d = raw_distance(a, b, Metric::L2);
            if d > 0.0 {
                for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                    *o += scale * (x - y) / d;
                }
            }
        }
    }
}

pub fn distance(a: &Embedding, b: &Embedding, metric: Metric) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(raw_distance(&a.0, &b.0, metric))
}

/// Dense row-major matrix of distances from each of `rows` anchors to each of
/// `cols` candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.entries[row * self.cols..(row + 1) * self.cols]
    }
}

pub(crate) fn check_same_dim<'a, I>(items: I) -> Result<usize>
where
    I: IntoIterator<Item = &'a Embedding>,
{
    let mut iter = items.into_iter();
    let first = iter.next().ok_or(Error::Empty("embedding list"))?;
    let dim = first.dim();
    for e in iter {
        if e.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: e.dim(),
            });
        }
    }
    Ok(dim)
}

/// All distances between `a` and `b`. Rows are computed in parallel; each
/// entry is produced by the same kernel as [`distance`], so results are
/// identical to a per-pair loop regardless of thread count.
pub fn pairwise_distances(
    a: &[Embedding],
    b: &[Embedding],
    metric: Metric,
) -> Result<DistanceMatrix> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("pairwise_distances input"));
    }
    let dim = check_same_dim(a.iter().chain(b))?;
    debug_assert!(dim > 0);
    let cols = b.len();
    let mut entries = vec![0.0; a.len() * cols];
    entries
        .par_chunks_mut(cols)
        .zip(a.par_iter())
        .for_each(|(row, x)| {
            for (slot, y) in row.iter_mut().zip(b) {
                *slot = raw_distance(&x.0, &y.0, metric);
            }
        });
    Ok(DistanceMatrix {
        rows: a.len(),
        cols,
        entries,
    })
}

/// Result of [`l2_normalize`]; `degenerate` is set when the input norm was at
/// or below [`NORMALIZE_EPS`] and the vector was returned unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub embedding: Embedding,
    pub degenerate: bool,
}

pub fn l2_normalize(v: &Embedding) -> Normalized {
    let n = v.norm();
    if n <= NORMALIZE_EPS {
        return Normalized {
            embedding: v.clone(),
            degenerate: true,
        };
    }
    Normalized {
        embedding: Embedding(v.0.iter().map(|x| x / n).collect()),
        degenerate: false,
    }
}
