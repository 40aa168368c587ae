#![allow(dead_code)]

use quitlab::seed;
use quitlab::{Embedding, Metric};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Seeds used by every seeded desk-scale comparison.
pub const PINNED_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub fn rng(seed: u64) -> ChaCha8Rng {
    seed::rng(seed)
}

pub fn emb(v: &[f64]) -> Embedding {
    Embedding::new(v.to_vec()).unwrap()
}

pub fn emb1(x: f64) -> Embedding {
    emb(&[x])
}

pub fn places(ps: &[&str]) -> Vec<String> {
    ps.iter().map(|s| s.to_string()).collect()
}

/// Random batch: `n_places` places with 1..=max_views samples each, entries
/// drawn from a small integer grid when `ties` is set so exact ties occur.
pub fn random_batch(
    r: &mut impl Rng,
    n_places: usize,
    max_views: usize,
    dim: usize,
    ties: bool,
) -> (Vec<Embedding>, Vec<String>) {
    let mut embs = Vec::new();
    let mut ids = Vec::new();
    for p in 0..n_places {
        for _ in 0..r.random_range(1..=max_views) {
            let v: Vec<f64> = (0..dim)
                .map(|_| {
                    if ties {
                        r.random_range(-3i32..=3) as f64 * 0.5
                    } else {
                        r.random_range(-2.0..2.0)
                    }
                })
                .collect();
            embs.push(emb(&v));
            ids.push(format!("p{p}"));
        }
    }
    (embs, ids)
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Independent distance used by the brute-force oracles.
pub fn oracle_distance(a: &Embedding, b: &Embedding, metric: Metric) -> f64 {
    let d = sq_dist(a.as_slice(), b.as_slice());
    match metric {
        Metric::SquaredL2 => d,
        Metric::L2 => d.sqrt(),
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
