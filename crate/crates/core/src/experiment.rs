//! End-to-end experiment plumbing shared by the CLI and the test suites:
//! data preparation, training, test evaluation, k-sweeps and loss comparisons.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_city, load_jsonl, split_dataset, CityParams, GeoRecord, Split};
use crate::error::{Error, Result};
use crate::eval::{recall_at_n, EvalConfig, EvalReport, DEFAULT_THRESHOLD_M};
use crate::losses::LossKind;
use crate::seed::derive_seed;
use crate::trainer::{train, Checkpoint, Mlp, MlpConfig, TrainConfig, TrainOutcome};

pub const CONFIG_VERSION: u32 = 1;

/// Initial learning rate used by desk-scale experiments. The library default
/// of 1e-4 is tuned for long schedules on large datasets; a few hundred SGD
/// steps on the synthetic city need a larger step.
pub const DESK_LR0: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub city: CityParams,
    /// Existing JSONL dataset; when set, `city` is ignored.
    pub path: Option<PathBuf>,
    pub split_fractions: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            city: CityParams::default(),
            path: None,
            split_fractions: [0.6, 0.2, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub ns: Vec<usize>,
    pub threshold_m: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            ns: vec![1, 5, 10],
            threshold_m: DEFAULT_THRESHOLD_M,
        }
    }
}

/// Everything one experiment needs. The root `seed` is the only source of
/// randomness: [`ExperimentConfig::resolved`] overwrites the per-component
/// seeds with values derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: MlpConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            dataset: DatasetConfig::default(),
            model: MlpConfig::default(),
            train: TrainConfig {
                lr0: DESK_LR0,
                ..TrainConfig::default()
            },
            eval: EvalSettings::default(),
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::invalid(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Copy with component seeds derived from the root seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.dataset.city.seed = derive_seed(self.seed, "city");
        c.model.seed = derive_seed(self.seed, "model");
        c.train.seed = derive_seed(self.seed, "train");
        c
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            ns: self.eval.ns.clone(),
            threshold_m: self.eval.threshold_m,
            metric: self.train.metric,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::invalid(format!(
                "unsupported config version {}",
                self.version
            )));
        }
        if let Some(p) = &self.dataset.path {
            if !p.exists() {
                return Err(Error::invalid(format!(
                    "dataset path {} does not exist",
                    p.display()
                )));
            }
        } else {
            self.dataset.city.validate()?;
        }
        self.train.validate()?;
        if self.eval.ns.contains(&0) {
            return Err(Error::invalid("eval ns must be positive"));
        }
        if !(self.eval.threshold_m.is_finite() && self.eval.threshold_m >= 0.0) {
            return Err(Error::invalid("threshold_m must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Records grouped by split.
#[derive(Clone, Debug)]
pub struct Partition {
    pub train: Vec<GeoRecord>,
    pub val: Vec<GeoRecord>,
    pub queries: Vec<GeoRecord>,
    pub database: Vec<GeoRecord>,
}

impl Partition {
    pub fn from_records(records: &[GeoRecord]) -> Result<Self> {
        let pick = |s: Split| {
            records
                .iter()
                .filter(|r| r.split == s)
                .cloned()
                .collect::<Vec<_>>()
        };
        let p = Partition {
            train: pick(Split::Train),
            val: pick(Split::Val),
            queries: pick(Split::Query),
            database: pick(Split::Database),
        };
        for (name, part) in [
            ("train", &p.train),
            ("val", &p.val),
            ("query", &p.queries),
            ("database", &p.database),
        ] {
            if part.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "dataset has no {name} records"
                )));
            }
        }
        Ok(p)
    }

    pub fn feature_dim(&self) -> usize {
        self.train[0].features.len()
    }
}

/// Generates (or loads) and splits the dataset of a resolved config.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Partition> {
    let records = match &cfg.dataset.path {
        Some(p) => load_jsonl(p)?,
        None => {
            let city = generate_city(&cfg.dataset.city)?;
            split_dataset(
                &city,
                cfg.dataset.split_fractions,
                derive_seed(cfg.seed, "split"),
            )?
        }
    };
    Partition::from_records(&records)
}

/// Test-set report for a model.
pub fn evaluate_test(model: &Mlp, data: &Partition, cfg: &EvalConfig) -> Result<EvalReport> {
    let embed = |rs: &[GeoRecord]| model.embed_all(rs.iter().map(|r| r.features.as_slice()));
    recall_at_n(
        &data.queries,
        &embed(&data.queries)?,
        &data.database,
        &embed(&data.database)?,
        cfg,
    )
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub train: TrainOutcome,
    /// Test report of the untrained model.
    pub baseline: EvalReport,
    /// Test report of the best checkpoint.
    pub report: EvalReport,
}

impl RunOutcome {
    pub fn checkpoint(&self) -> &Checkpoint {
        &self.train.checkpoint
    }
}

/// Trains on already prepared data with a resolved config.
pub fn run_on(cfg: &ExperimentConfig, data: &Partition) -> Result<RunOutcome> {
    let mut mc = cfg.model.clone();
    mc.input_dim = data.feature_dim();
    let eval = cfg.eval_config();
    let label = cfg.train.loss.name();
    let k = cfg.train.loss_spec().effective_k();
    let baseline = evaluate_test(&Mlp::new(mc.clone())?, data, &eval)?.with_label(label, k);
    let outcome = train(&data.train, &data.val, &cfg.train, &mc)?;
    let report = evaluate_test(&outcome.checkpoint.model, data, &eval)?.with_label(label, k);
    Ok(RunOutcome {
        train: outcome,
        baseline,
        report,
    })
}

/// Resolves seeds, prepares data and trains one model.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let data = prepare_data(&cfg)?;
    run_on(&cfg, &data)
}

/// Trains one model per loss on identical data and seeds.
pub fn compare_losses(cfg: &ExperimentConfig, losses: &[LossKind]) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let data = prepare_data(&cfg)?;
    losses
        .par_iter()
        .map(|&loss| {
            let mut c = cfg.clone();
            c.train.loss = loss;
            Ok(run_on(&c, &data)?.report)
        })
        .collect()
}

/// Trains one model per `k` on identical data and seeds.
pub fn sweep_k(cfg: &ExperimentConfig, ks: &[usize]) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid(
            "k values must be a nonempty list of positive integers",
        ));
    }
    let cfg = cfg.resolved();
    let data = prepare_data(&cfg)?;
    ks.par_iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.train.k = k;
            Ok(run_on(&c, &data)?.report)
        })
        .collect()
}

/// CSV with one row per k: `k,recall@N...`.
pub fn sweep_csv(reports: &[EvalReport], ns: &[usize]) -> String {
    let mut out = String::from("k");
    for n in ns {
        out.push_str(&format!(",recall@{n}"));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&r.k.to_string());
        for n in ns {
            out.push_str(&format!(",{}", r.recall(*n).unwrap_or(0.0)));
        }
        out.push('\n');
    }
    out
}
