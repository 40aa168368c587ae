use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, Mlp, MlpConfig};
use crate::dataset::{query_database_partition, BatchSampler, GeoRecord};
use crate::embedding::{Embedding, Metric};
use crate::error::{Error, Result};
use crate::eval::{
    leave_one_out_recall1, recall_at_n, EvalConfig, EvalReport, DEFAULT_THRESHOLD_M,
};
use crate::losses::{batch_objective, LossKind, LossSpec, Margins};
use crate::mining::PositivePolicy;
use crate::seed;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub k: usize,
    pub margins: Margins,
    pub metric: Metric,
    pub positive_policy: PositivePolicy,
    pub lr0: f64,
    /// Multiplier applied every `lr_step_epochs` epochs.
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub places_per_batch: usize,
    pub views_per_place: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::QuitTrihard,
            k: 2,
            margins: Margins::default(),
            metric: Metric::SquaredL2,
            positive_policy: PositivePolicy::Clamp,
            lr0: 1e-4,
            lr_decay: 0.5,
            lr_step_epochs: 5,
            early_stop_patience: 10,
            max_epochs: 30,
            places_per_batch: 4,
            views_per_place: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.margins.validate()?;
        if self.k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::invalid(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) || self.lr_step_epochs == 0 {
            return Err(Error::invalid(
                "lr_decay must be positive and lr_step_epochs >= 1",
            ));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::invalid("early_stop_patience must be >= 1"));
        }
        Ok(())
    }

    /// `lr0 · decay^⌊epoch / step⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.lr_step_epochs) as i32)
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            kind: self.loss,
            k: self.k,
            margins: self.margins,
            metric: self.metric,
            positive_policy: self.positive_policy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub val_recall1: f64,
    pub wall_ms: u64,
}

/// Position in the trainer's random streams: every stream is a pure function
/// of `seed` and the epoch, so this pair is the whole state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: Mlp,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub best_val_recall1: f64,
    pub rng: RngState,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}

pub fn config_hash(tc: &TrainConfig, mc: &MlpConfig) -> String {
    seed::config_hash(&(tc, mc))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best checkpoint by validation Recall@1.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Held-out records split into queries and database.
#[derive(Clone, Debug)]
pub struct Holdout {
    pub queries: Vec<GeoRecord>,
    pub database: Vec<GeoRecord>,
}

impl Holdout {
    /// One random view per place as query, the rest as database.
    pub fn from_records(records: &[GeoRecord], seed: u64) -> Result<Self> {
        let (q, d) = query_database_partition(records, seed);
        if q.is_empty() || d.is_empty() {
            return Err(Error::InsufficientData(
                "holdout needs queries and database entries".into(),
            ));
        }
        Ok(Holdout {
            queries: q.into_iter().map(|i| records[i].clone()).collect(),
            database: d.into_iter().map(|i| records[i].clone()).collect(),
        })
    }
}

pub fn evaluate_model(model: &Mlp, holdout: &Holdout, config: &EvalConfig) -> Result<EvalReport> {
    let embed = |rs: &[GeoRecord]| -> Result<Vec<Embedding>> {
        model.embed_all(rs.iter().map(|r| r.features.as_slice()))
    };
    recall_at_n(
        &holdout.queries,
        &embed(&holdout.queries)?,
        &holdout.database,
        &embed(&holdout.database)?,
        config,
    )
}

/// Validation Recall@1, leave-one-out over every validation view.
fn val_recall1(model: &Mlp, val: &[GeoRecord], metric: Metric) -> Result<f64> {
    let embeddings = model.embed_all(val.iter().map(|r| r.features.as_slice()))?;
    leave_one_out_recall1(val, &embeddings, DEFAULT_THRESHOLD_M, metric)
}

/// Runs one epoch of SGD over `sampler`'s batches. Returns the mean batch
/// loss, or `None` when every batch was starved.
pub fn train_epoch(
    model: &mut Mlp,
    records: &[GeoRecord],
    sampler: &BatchSampler,
    spec: &LossSpec,
    epoch: usize,
    lr: f64,
    seed: u64,
) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut used = 0usize;
    for (b, batch) in sampler.epoch(epoch).into_iter().enumerate() {
        let traces = batch
            .iter()
            .map(|&i| model.forward_trace(&records[i].features))
            .collect::<Result<Vec<_>>>()?;
        let embeddings: Vec<Embedding> = traces.iter().map(|t| t.output.clone()).collect();
        let places: Vec<String> = batch.iter().map(|&i| records[i].place_id.clone()).collect();
        let batch_seed = seed::derive_indexed(seed, &format!("batch-{epoch}"), b as u64);
        let Some(outcome) = batch_objective(&embeddings, &places, spec, batch_seed)? else {
            log::warn!("epoch {epoch} batch {b}: no valid tuple, skipped");
            continue;
        };
        let mut grads = Gradients::zeros_like(model);
        for (trace, g) in traces.iter().zip(&outcome.grads) {
            if g.iter().any(|&v| v != 0.0) {
                model.backward(trace, g, &mut grads)?;
            }
        }
        model.sgd_step(&grads, lr);
        total += outcome.value;
        used += 1;
    }
    Ok((used > 0).then(|| total / used as f64))
}

/// Trains `g(x)` on `train` with early stopping on validation Recall@1.
///
/// Each epoch runs the P×V sampler, mines tuples per anchor, takes one SGD
/// step per batch and then measures leave-one-out Recall@1 on `val`. Training stops
/// at `max_epochs` or after `early_stop_patience` consecutive epochs without
/// a strict improvement.
pub fn train(
    train: &[GeoRecord],
    val: &[GeoRecord],
    tc: &TrainConfig,
    mc: &MlpConfig,
) -> Result<TrainOutcome> {
    tc.validate()?;
    let model = Mlp::new(mc.clone())?;
    train_from(model, train, val, tc)
}

/// As [`train`], starting from an existing model.
pub fn train_from(
    mut model: Mlp,
    train: &[GeoRecord],
    val: &[GeoRecord],
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    tc.validate()?;
    let places = crate::dataset::places_in_order(train);
    if places.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "training needs at least 2 places, got {}",
            places.len()
        )));
    }
    let sampler = BatchSampler::new(
        train,
        tc.places_per_batch,
        tc.views_per_place,
        seed::derive_seed(tc.seed, "sampler"),
    )?;
    if val.len() < 2 {
        return Err(Error::InsufficientData(
            "validation split needs at least two records".into(),
        ));
    }
    let spec = tc.loss_spec();
    let hash = config_hash(tc, &model.config);
    let loss_seed = seed::derive_seed(tc.seed, "loss");

    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 0..tc.max_epochs {
        let start = Instant::now();
        let lr = tc.lr_at(epoch);
        let mean_loss = train_epoch(&mut model, train, &sampler, &spec, epoch, lr, loss_seed)?
            .ok_or(Error::Starved { epoch })?;
        let recall = val_recall1(&model, val, tc.metric)?;
        log.push(EpochLog {
            epoch,
            mean_loss,
            lr,
            val_recall1: recall,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        log::debug!("epoch {epoch}: loss {mean_loss:.6} lr {lr:e} val R@1 {recall:.4}");
        if best.as_ref().is_none_or(|b| recall > b.best_val_recall1) {
            best = Some(Checkpoint {
                version: CHECKPOINT_VERSION,
                model: model.clone(),
                train_config: tc.clone(),
                epoch,
                best_val_recall1: recall,
                rng: RngState {
                    seed: tc.seed,
                    next_epoch: epoch + 1,
                },
                config_hash: hash.clone(),
            });
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    let checkpoint = match best {
        Some(b) => b,
        None => Checkpoint {
            version: CHECKPOINT_VERSION,
            best_val_recall1: val_recall1(&model, val, tc.metric)?,
            model,
            train_config: tc.clone(),
            epoch: 0,
            rng: RngState {
                seed: tc.seed,
                next_epoch: 0,
            },
            config_hash: hash,
        },
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        stopped_early,
    })
}

pub const LOG_HEADER: &str = "epoch,mean_loss,lr,val_recall1,wall_ms";

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            e.epoch, e.mean_loss, e.lr, e.val_recall1, e.wall_ms
        );
    }
    out
}

pub fn parse_log_csv(text: &str) -> Result<Vec<EpochLog>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == LOG_HEADER => {}
        _ => return Err(Error::invalid("training log has an unexpected header")),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let bad = || Error::invalid(format!("training log line {}: {l:?}", i + 1));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|_| bad())?,
                mean_loss: f[1].parse().map_err(|_| bad())?,
                lr: f[2].parse().map_err(|_| bad())?,
                val_recall1: f[3].parse().map_err(|_| bad())?,
                wall_ms: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
