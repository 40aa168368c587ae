//! Geo-tagged records, JSONL persistence and the synthetic multi-view city.
//!
//! The city generator lays places out on a square grid. Each place has a
//! latent content vector living in a fixed "content" subspace of the feature
//! space. Its first `covisible_views` views see that content directly (plus
//! appearance noise); the remaining views are perspective-shifted: they add a
//! view-specific content direction and, with weight `distractor_overlap`,
//! drift toward a randomly chosen other place. Appearance noise lives in the
//! complementary subspace, which is what a trained embedding learns to ignore.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Query,
    Database,
}

/// One database or query item. Field names match the JSONL schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub x_m: f64,
    pub y_m: f64,
    pub place_id: String,
    pub split: Split,
}

impl GeoRecord {
    pub fn position(&self) -> (f64, f64) {
        (self.x_m, self.y_m)
    }

    /// Planar Euclidean distance in meters.
    pub fn geo_distance_m(&self, other: &GeoRecord) -> f64 {
        (self.x_m - other.x_m).hypot(self.y_m - other.y_m)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(format!("record {:?} has non-finite features", self.id));
        }
        if !(self.x_m.is_finite() && self.y_m.is_finite()) {
            return Err(format!("record {:?} has a non-finite position", self.id));
        }
        Ok(())
    }
}

/// Id of view `view` of place `place` as produced by [`generate_city`].
pub fn view_id(place: usize, view: usize) -> String {
    format!("{}-v{view:02}", place_id(place))
}

pub fn place_id(place: usize) -> String {
    format!("p{place:04}")
}

/// Inverse of [`view_id`].
pub fn parse_view_id(id: &str) -> Option<(usize, usize)> {
    let (p, v) = id.strip_prefix('p')?.split_once("-v")?;
    Some((p.parse().ok()?, v.parse().ok()?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CityParams {
    pub num_places: usize,
    pub views_per_place: usize,
    /// Views that share the place's content directly; the rest are
    /// perspective-shifted.
    pub covisible_views: usize,
    pub feature_dim: usize,
    /// Scale of per-view appearance noise.
    pub view_noise: f64,
    /// Weight with which shifted views drift toward another place's content.
    pub distractor_overlap: f64,
    /// Scale of the view-specific content direction added to shifted views.
    pub perspective_shift: f64,
    pub place_spacing_m: f64,
    /// Diameter of the disk in which a place's views are positioned.
    pub intra_place_spread_m: f64,
    pub seed: u64,
}

impl Default for CityParams {
    fn default() -> Self {
        CityParams {
            num_places: 100,
            views_per_place: 8,
            covisible_views: 2,
            feature_dim: 32,
            view_noise: 1.0,
            distractor_overlap: 0.2,
            perspective_shift: 0.3,
            place_spacing_m: 100.0,
            intra_place_spread_m: 8.0,
            seed: 0,
        }
    }
}

impl CityParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParam(msg));
        if self.num_places == 0 {
            return bad("num_places must be positive".into());
        }
        if self.views_per_place < 3 {
            return bad(format!(
                "views_per_place must be >= 3, got {}",
                self.views_per_place
            ));
        }
        if self.covisible_views == 0 || self.covisible_views >= self.views_per_place {
            return bad(format!(
                "covisible_views must be in 1..{}, got {}",
                self.views_per_place, self.covisible_views
            ));
        }
        if self.feature_dim < 2 {
            return bad(format!(
                "feature_dim must be >= 2, got {}",
                self.feature_dim
            ));
        }
        for (name, v) in [
            ("view_noise", self.view_noise),
            ("perspective_shift", self.perspective_shift),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.distractor_overlap) {
            return bad(format!(
                "distractor_overlap must lie in [0, 1], got {}",
                self.distractor_overlap
            ));
        }
        if !(self.place_spacing_m.is_finite() && self.intra_place_spread_m.is_finite())
            || self.intra_place_spread_m <= 0.0
            || self.place_spacing_m <= 2.0 * self.intra_place_spread_m
        {
            return bad(format!(
                "need place_spacing_m > 2 * intra_place_spread_m > 0, got {} and {}",
                self.place_spacing_m, self.intra_place_spread_m
            ));
        }
        Ok(())
    }

    pub fn content_dim(&self) -> usize {
        self.feature_dim / 2
    }

    pub fn is_covisible(&self, view: usize) -> bool {
        view < self.covisible_views
    }
}

/// Orthonormal basis of R^n from Gram-Schmidt on a Gaussian matrix; rows are
/// the basis vectors.
fn random_orthonormal_basis(n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = crate::embedding::norm(&v);
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

fn gaussian(dim: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Maps coefficients onto a set of basis rows.
fn embed(coeffs: &[f64], rows: &[Vec<f64>], out: &mut [f64]) {
    for (c, row) in coeffs.iter().zip(rows) {
        for (o, r) in out.iter_mut().zip(row) {
            *o += c * r;
        }
    }
}

/// Generates the synthetic city; every record is tagged [`Split::Train`].
pub fn generate_city(p: &CityParams) -> Result<Vec<GeoRecord>> {
    p.validate()?;
    let mut rng = seed::rng(p.seed);
    let f = p.feature_dim;
    let r = p.content_dim();
    let basis = random_orthonormal_basis(f, &mut rng);
    let (content_basis, nuisance_basis) = basis.split_at(r);
    let content_scale = 1.0 / (r as f64).sqrt();
    let nuisance_scale = 1.0 / ((f - r) as f64).sqrt();

    let contents: Vec<Vec<f64>> = (0..p.num_places)
        .map(|_| gaussian(r, content_scale, &mut rng))
        .collect();
    let side = (p.num_places as f64).sqrt().ceil() as usize;

    let mut records = Vec::with_capacity(p.num_places * p.views_per_place);
    for (place, content) in contents.iter().enumerate() {
        let center = (
            (place % side) as f64 * p.place_spacing_m,
            (place / side) as f64 * p.place_spacing_m,
        );
        for view in 0..p.views_per_place {
            let mut coeffs = content.clone();
            if !p.is_covisible(view) {
                let shift = gaussian(r, content_scale * p.perspective_shift, &mut rng);
                let other = if p.num_places > 1 {
                    let o = rng.random_range(0..p.num_places - 1);
                    if o >= place {
                        o + 1
                    } else {
                        o
                    }
                } else {
                    place
                };
                let o = p.distractor_overlap;
                for ((c, s), q) in coeffs.iter_mut().zip(&shift).zip(&contents[other]) {
                    *c = (1.0 - o) * (*c + s) + o * q;
                }
            }
            let noise = gaussian(f - r, nuisance_scale * p.view_noise, &mut rng);
            let mut features = vec![0.0; f];
            embed(&coeffs, content_basis, &mut features);
            embed(&noise, nuisance_basis, &mut features);

            let radius = 0.5 * p.intra_place_spread_m * rng.random::<f64>().sqrt();
            let angle = std::f64::consts::TAU * rng.random::<f64>();
            records.push(GeoRecord {
                id: view_id(place, view),
                features,
                x_m: center.0 + radius * angle.cos(),
                y_m: center.1 + radius * angle.sin(),
                place_id: place_id(place),
                split: Split::Train,
            });
        }
    }
    Ok(records)
}

pub fn save_jsonl(records: &[GeoRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<GeoRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg,
        };
        let rec: GeoRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate().map_err(parse_err)?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        records.push(rec);
    }
    Ok(records)
}

/// Distinct place ids in order of first appearance.
pub fn places_in_order(records: &[GeoRecord]) -> Vec<String> {
    let mut seen = HashSet::new();
    records
        .iter()
        .filter(|r| seen.insert(r.place_id.as_str()))
        .map(|r| r.place_id.clone())
        .collect()
}

/// For each place among `records`, picks one record as the query (uniformly,
/// under `seed`); everything else goes to the database. Returns indices into
/// `records`, each list in input order.
pub fn query_database_partition(records: &[GeoRecord], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_place: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_place.entry(&r.place_id).or_default().push(i);
    }
    let mut rng = seed::rng(seed);
    let mut is_query = vec![false; records.len()];
    for members in by_place.values() {
        is_query[members[rng.random_range(0..members.len())]] = true;
    }
    (0..records.len()).partition(|&i| is_query[i])
}

/// Assigns whole places to train / val / test in the given proportions, then
/// splits each test place into one query and the rest database.
///
/// Place counts are `floor(fraction × places)`, with the remainder handed to
/// the earliest splits; every split must receive at least one place.
pub fn split_dataset(
    records: &[GeoRecord],
    fractions: [f64; 3],
    seed: u64,
) -> Result<Vec<GeoRecord>> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must be nonnegative and sum to 1, got {fractions:?}"
        )));
    }
    let mut places = places_in_order(records);
    let n = places.len();
    let mut counts = fractions.map(|f| (f * n as f64 + 1e-9).floor() as usize);
    let mut remainder = n - counts.iter().sum::<usize>().min(n);
    for c in counts.iter_mut() {
        if remainder == 0 {
            break;
        }
        *c += 1;
        remainder -= 1;
    }
    if counts.contains(&0) {
        return Err(Error::InsufficientData(format!(
            "{n} places cannot fill train/val/test splits {fractions:?}"
        )));
    }

    places.shuffle(&mut seed::rng(seed::derive_seed(seed, "places")));
    let mut split_of: BTreeMap<String, Split> = BTreeMap::new();
    let mut iter = places.into_iter();
    for (count, split) in counts
        .into_iter()
        .zip([Split::Train, Split::Val, Split::Test])
    {
        for p in iter.by_ref().take(count) {
            split_of.insert(p, split);
        }
    }

    let mut out: Vec<GeoRecord> = records.to_vec();
    for r in &mut out {
        r.split = split_of[&r.place_id];
    }
    let test_idx: Vec<usize> = (0..out.len())
        .filter(|&i| out[i].split == Split::Test)
        .collect();
    let test: Vec<GeoRecord> = test_idx.iter().map(|&i| out[i].clone()).collect();
    let (queries, database) = query_database_partition(&test, seed::derive_seed(seed, "queries"));
    for q in queries {
        out[test_idx[q]].split = Split::Query;
    }
    for d in database {
        out[test_idx[d]].split = Split::Database;
    }
    Ok(out)
}

/// Deterministic P×V batch sampler over the training records.
///
/// Each epoch shuffles the eligible places (those with at least V views),
/// takes them P at a time, and draws V views per place without replacement.
/// Leftover places that do not fill a batch are skipped for that epoch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    places: Vec<Vec<usize>>,
    places_per_batch: usize,
    views_per_place: usize,
    seed: u64,
}

impl BatchSampler {
    /// `records` indices are the ones returned in batches.
    pub fn new(
        records: &[GeoRecord],
        places_per_batch: usize,
        views_per_place: usize,
        seed: u64,
    ) -> Result<Self> {
        if places_per_batch < 2 || views_per_place < 2 {
            return Err(Error::invalid(format!(
                "batches need P >= 2 places and V >= 2 views, got P={places_per_batch} V={views_per_place}"
            )));
        }
        let mut by_place: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_place.entry(&r.place_id).or_default().push(i);
        }
        let places: Vec<Vec<usize>> = by_place
            .into_values()
            .filter(|v| v.len() >= views_per_place)
            .collect();
        if places.len() < places_per_batch {
            return Err(Error::InsufficientData(format!(
                "{} places with >= {views_per_place} views, need {places_per_batch}",
                places.len()
            )));
        }
        Ok(BatchSampler {
            places,
            places_per_batch,
            views_per_place,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.places.len() / self.places_per_batch
    }

    /// Records that serve as anchors in one epoch.
    pub fn anchors_per_epoch(&self) -> usize {
        self.batches_per_epoch() * self.places_per_batch * self.views_per_place
    }

    /// Batches of record indices for `epoch`, a pure function of the seed and
    /// the epoch number.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = seed::rng(seed::derive_indexed(self.seed, "epoch", epoch as u64));
        let mut order: Vec<usize> = (0..self.places.len()).collect();
        order.shuffle(&mut rng);
        order
            .chunks_exact(self.places_per_batch)
            .map(|chunk| {
                let mut batch = Vec::with_capacity(self.places_per_batch * self.views_per_place);
                for &p in chunk {
                    let mut views = self.places[p].clone();
                    views.shuffle(&mut rng);
                    batch.extend_from_slice(&views[..self.views_per_place]);
                }
                batch
            })
            .collect()
    }
}
