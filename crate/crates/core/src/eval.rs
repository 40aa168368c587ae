//! Exhaustive retrieval and Recall@N under a geographic correctness radius.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::GeoRecord;
use crate::embedding::{check_same_dim, raw_distance, Embedding, Metric};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD_M: f64 = 25.0;

/// Indices of the `n` database entries nearest to `query`, nearest first;
/// equal distances are ordered by id.
fn rank(
    query: &Embedding,
    database: &[(&str, &Embedding)],
    n: usize,
    metric: Metric,
) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = database
        .iter()
        .enumerate()
        .map(|(i, (_, e))| (raw_distance(query.as_slice(), e.as_slice(), metric), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.total_cmp(&b.0)
            .then_with(|| database[a.1].0.cmp(database[b.1].0))
    };
    let n = n.min(scored.len());
    if n < scored.len() {
        scored.select_nth_unstable_by(n, cmp);
        scored.truncate(n);
    }
    scored.sort_by(cmp);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Ids of the `n` nearest database embeddings, ascending by distance, ties by
/// id. Returns the full ranking when `n` exceeds the database size.
pub fn retrieve_top_n(
    query: &Embedding,
    database: &[(String, Embedding)],
    n: usize,
    metric: Metric,
) -> Result<Vec<String>> {
    if database.is_empty() {
        return Err(Error::Empty("database"));
    }
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    check_same_dim(std::iter::once(query).chain(database.iter().map(|(_, e)| e)))?;
    let view: Vec<(&str, &Embedding)> = database.iter().map(|(id, e)| (id.as_str(), e)).collect();
    Ok(rank(query, &view, n, metric)
        .into_iter()
        .map(|i| database[i].0.clone())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ns: Vec<usize>,
    pub threshold_m: f64,
    pub metric: Metric,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ns: vec![1, 5, 10],
            threshold_m: DEFAULT_THRESHOLD_M,
            metric: Metric::SquaredL2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub top_ids: Vec<String>,
    /// 1-based rank of the first retrieved item within the threshold, if any
    /// among `top_ids`. The query is correct at N iff `hit_rank <= N`.
    pub hit_rank: Option<usize>,
}

impl QueryResult {
    pub fn correct_at(&self, n: usize) -> bool {
        self.hit_rank.is_some_and(|r| r <= n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub k: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub num_queries: usize,
    pub per_query: Vec<QueryResult>,
    pub config_hash: String,
    pub distance_threshold_m: f64,
}

impl EvalReport {
    pub fn recall(&self, n: usize) -> Option<f64> {
        self.recall_at.get(&n).copied()
    }

    pub fn with_label(mut self, method: impl Into<String>, k: usize) -> Self {
        self.method = method.into();
        self.k = k;
        self
    }
}

/// Leave-one-out Recall@1 over a single set: every record queries all the
/// others. Ties are broken by id, as in [`retrieve_top_n`].
pub fn leave_one_out_recall1(
    records: &[GeoRecord],
    embeddings: &[Embedding],
    threshold_m: f64,
    metric: Metric,
) -> Result<f64> {
    if records.len() != embeddings.len() {
        return Err(Error::DimensionMismatch {
            expected: records.len(),
            got: embeddings.len(),
        });
    }
    if records.len() < 2 {
        return Err(Error::Empty(
            "leave-one-out recall needs at least two records",
        ));
    }
    check_same_dim(embeddings.iter())?;
    let hits: usize = (0..records.len())
        .into_par_iter()
        .map(|i| {
            let best = (0..records.len())
                .filter(|&j| j != i)
                .map(|j| {
                    (
                        raw_distance(embeddings[i].as_slice(), embeddings[j].as_slice(), metric),
                        j,
                    )
                })
                .min_by(|a, b| {
                    a.0.total_cmp(&b.0)
                        .then_with(|| records[a.1].id.cmp(&records[b.1].id))
                })
                .map(|(_, j)| j)
                .expect("at least one other record");
            usize::from(records[i].geo_distance_m(&records[best]) <= threshold_m)
        })
        .sum();
    Ok(hits as f64 / records.len() as f64)
}

/// Recall@N: a query is correct at N when any of its top-N retrievals lies
/// within `threshold_m` meters of the query position.
pub fn recall_at_n(
    queries: &[GeoRecord],
    query_embeddings: &[Embedding],
    database: &[GeoRecord],
    database_embeddings: &[Embedding],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Empty("queries"));
    }
    if database.is_empty() {
        return Err(Error::Empty("database"));
    }
    if queries.len() != query_embeddings.len() || database.len() != database_embeddings.len() {
        return Err(Error::invalid("records and embeddings differ in length"));
    }
    if !(config.threshold_m.is_finite() && config.threshold_m >= 0.0) {
        return Err(Error::invalid(format!(
            "bad distance threshold {}",
            config.threshold_m
        )));
    }
    if config.ns.contains(&0) {
        return Err(Error::invalid("recall cutoffs must be >= 1"));
    }
    check_same_dim(query_embeddings.iter().chain(database_embeddings))?;
    let max_n = config.ns.iter().copied().max().unwrap_or(1);
    let view: Vec<(&str, &Embedding)> = database
        .iter()
        .zip(database_embeddings)
        .map(|(r, e)| (r.id.as_str(), e))
        .collect();

    let per_query: Vec<QueryResult> = queries
        .par_iter()
        .zip(query_embeddings)
        .map(|(q, qe)| {
            let top = rank(qe, &view, max_n, config.metric);
            let hit_rank = top
                .iter()
                .position(|&i| database[i].geo_distance_m(q) <= config.threshold_m)
                .map(|p| p + 1);
            QueryResult {
                query_id: q.id.clone(),
                top_ids: top.iter().map(|&i| database[i].id.clone()).collect(),
                hit_rank,
            }
        })
        .collect();

    let total = per_query.len() as f64;
    let recall_at = config
        .ns
        .iter()
        .map(|&n| {
            let hits = per_query.iter().filter(|r| r.correct_at(n)).count();
            (n, hits as f64 / total)
        })
        .collect();
    Ok(EvalReport {
        method: String::new(),
        k: 1,
        recall_at,
        num_queries: per_query.len(),
        per_query,
        config_hash: crate::seed::config_hash(config),
        distance_threshold_m: config.threshold_m,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// `method,k,recall@N...` header followed by one row per report. The recall
/// columns come from `ns`; with no cutoffs only the header is written.
pub fn recall_csv(reports: &[EvalReport], ns: &[usize]) -> String {
    let mut out = String::from("method,k");
    for n in ns {
        let _ = write!(out, ",recall@{n}");
    }
    out.push('\n');
    if ns.is_empty() {
        return out;
    }
    for r in reports {
        let _ = write!(out, "{},{}", r.method, r.k);
        for n in ns {
            match r.recall(*n) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub fn emit_report(
    report: &EvalReport,
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?,
        ReportFormat::Csv => {
            let ns: Vec<usize> = report.recall_at.keys().copied().collect();
            recall_csv(std::slice::from_ref(report), &ns)
        }
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}
