//! Command-line interface: `quitlab <generate|train|eval|sweep-k|compare-losses|gradcheck>`.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! runtime failures (I/O, training starvation, failed gradient checks).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataset::{generate_city, load_jsonl, save_jsonl, split_dataset, GeoRecord, Split};
use crate::embedding::Metric;
use crate::error::Error;
use crate::eval::{emit_report, recall_at_n, recall_csv, EvalConfig, ReportFormat};
use crate::experiment::{self, ExperimentConfig};
use crate::losses::LossKind;
use crate::seed::derive_seed;
use crate::trainer::gradcheck::{
    default_spec, gradcheck_loss, gradcheck_model, GradcheckReport, InstanceShape,
};
use crate::trainer::train::log_csv;
use crate::trainer::Checkpoint;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "QUITLAB_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "quitlab",
    version,
    about = "Quintuplet-loss metric learning lab"
)]
pub struct Cli {
    /// Experiment configuration (JSON). Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every component seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for artifacts (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic city and write it, split-tagged, as JSONL.
    Generate(GenerateArgs),
    /// Train one model and write checkpoint, training log and test report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the query/database records of a dataset.
    Eval(EvalArgs),
    /// Train one model per k and write a k-sweep table.
    SweepK(SweepArgs),
    /// Train one model per loss on identical data and seeds.
    CompareLosses(CompareArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub places: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub covisible: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Output JSONL file.
    #[arg(short = 'o', long = "output")]
    pub output: PathBuf,
}

/// Overrides shared by every training command.
#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    /// Existing split-tagged JSONL dataset instead of a generated city.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Relative margin.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Absolute margin.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long, value_parser = parse_metric)]
    pub metric: Option<Metric>,
    #[arg(long)]
    pub places: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split-tagged JSONL dataset; its query and database records are used.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub threshold_m: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub ns: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub k_values: Vec<usize>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Losses to compare (default: all).
    #[arg(long, value_delimiter = ',', value_parser = parse_loss)]
    pub losses: Option<Vec<LossKind>>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Losses to check (default: all).
    #[arg(long, value_delimiter = ',', value_parser = parse_loss)]
    pub losses: Option<Vec<LossKind>>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, value_parser = parse_metric, default_value = "squared_l2")]
    pub metric: Metric,
    /// Skip the checks through the embedding network.
    #[arg(long)]
    pub loss_only: bool,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse::<LossKind>().map_err(|e| e.to_string())
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    match s {
        "squared_l2" => Ok(Metric::SquaredL2),
        "l2" => Ok(Metric::L2),
        _ => Err(format!(
            "unknown metric {s:?}; valid metrics: squared_l2, l2"
        )),
    }
}

/// CLI failure with its exit-code class.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
    /// The command ran but its check did not pass.
    Failed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e)
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) | CliError::Failed(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
            CliError::Failed(m) => write!(f, "failed: {m}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match configure_threads().and_then(|_| dispatch(&cli)) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "{THREADS_ENV} must be a positive integer, got {raw:?}"
        ))
    })?;
    // A pool may already exist when the CLI runs inside a test process.
    if rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .is_err()
    {
        log::debug!("global thread pool already initialised; {THREADS_ENV} ignored");
    }
    Ok(())
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", p.display())))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &TrainOverrides) {
    if let Some(d) = &o.data {
        cfg.dataset.path = Some(d.clone());
    }
    if let Some(l) = o.loss {
        cfg.train.loss = l;
    }
    if let Some(k) = o.k {
        cfg.train.k = k;
    }
    if let Some(a) = o.alpha {
        cfg.train.margins.alpha = a;
    }
    if let Some(b) = o.beta {
        cfg.train.margins.beta = b;
    }
    if let Some(lr) = o.lr0 {
        cfg.train.lr0 = lr;
    }
    if let Some(e) = o.max_epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(m) = o.metric {
        cfg.train.metric = m;
    }
    if let Some(p) = o.places {
        cfg.dataset.city.num_places = p;
    }
}

fn out_dir(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let dir = cfg.out.clone().ok_or_else(|| {
        CliError::Usage("an output directory is required (--out or \"out\" in the config)".into())
    })?;
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(Error::io(&dir, e)))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn dispatch(cli: &Cli) -> CliResult<String> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Generate(a) => generate(&mut cfg, a),
        Command::Train(a) => {
            apply_overrides(&mut cfg, &a.overrides);
            train(&cfg)
        }
        Command::Eval(a) => eval(&cfg, a),
        Command::SweepK(a) => {
            apply_overrides(&mut cfg, &a.overrides);
            sweep(&cfg, &a.k_values)
        }
        Command::CompareLosses(a) => {
            apply_overrides(&mut cfg, &a.overrides);
            compare(&cfg, a.losses.as_deref().unwrap_or(&LossKind::ALL))
        }
        Command::Gradcheck(a) => gradcheck(&cfg, a),
    }
}

fn generate(cfg: &mut ExperimentConfig, a: &GenerateArgs) -> CliResult<String> {
    let city = &mut cfg.dataset.city;
    if let Some(p) = a.places {
        city.num_places = p;
    }
    if let Some(v) = a.views {
        city.views_per_place = v;
    }
    if let Some(c) = a.covisible {
        city.covisible_views = c;
    }
    if let Some(f) = a.feature_dim {
        city.feature_dim = f;
    }
    let cfg = cfg.resolved();
    let records = generate_city(&cfg.dataset.city)?;
    let records = split_dataset(
        &records,
        cfg.dataset.split_fractions,
        derive_seed(cfg.seed, "split"),
    )?;
    save_jsonl(&records, &a.output)?;
    let count = |s: Split| records.iter().filter(|r| r.split == s).count();
    Ok(format!(
        "wrote {} records to {} (train {}, val {}, query {}, database {})\n",
        records.len(),
        a.output.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Query),
        count(Split::Database)
    ))
}

fn train(cfg: &ExperimentConfig) -> CliResult<String> {
    let dir = out_dir(cfg)?;
    let run = experiment::run_experiment(cfg)?;
    run.checkpoint().save(dir.join("checkpoint.json"))?;
    write(&dir.join("train_log.csv"), &log_csv(&run.train.log))?;
    emit_report(&run.report, dir.join("report.json"), ReportFormat::Json)?;
    let ns = &cfg.eval.ns;
    write(
        &dir.join("report.csv"),
        &recall_csv(std::slice::from_ref(&run.report), ns),
    )?;
    let mut text = format!(
        "trained {} (k={}) for {} epochs; best epoch {} val R@1 {}\n",
        run.report.method,
        run.report.k,
        run.train.log.len(),
        run.checkpoint().epoch,
        run.checkpoint().best_val_recall1
    );
    let _ = writeln!(
        text,
        "test R@1 untrained {} -> trained {}",
        run.baseline.recall(1).unwrap_or(f64::NAN),
        run.report.recall(1).unwrap_or(f64::NAN)
    );
    text.push_str(&recall_csv(std::slice::from_ref(&run.report), ns));
    Ok(text)
}

fn eval(cfg: &ExperimentConfig, a: &EvalArgs) -> CliResult<String> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let records = load_jsonl(&a.data)?;
    let pick = |s: Split| {
        records
            .iter()
            .filter(|r| r.split == s)
            .cloned()
            .collect::<Vec<GeoRecord>>()
    };
    let (queries, database) = (pick(Split::Query), pick(Split::Database));
    if queries.is_empty() || database.is_empty() {
        return Err(CliError::Runtime(Error::InsufficientData(format!(
            "{} has no query or no database records",
            a.data.display()
        ))));
    }
    let eval_cfg = EvalConfig {
        ns: a.ns.clone().unwrap_or_else(|| cfg.eval.ns.clone()),
        threshold_m: a.threshold_m.unwrap_or(cfg.eval.threshold_m),
        metric: ckpt.train_config.metric,
    };
    if eval_cfg.ns.contains(&0) {
        return Err(CliError::Usage("--ns values must be positive".into()));
    }
    let embed = |rs: &[GeoRecord]| {
        ckpt.model
            .embed_all(rs.iter().map(|r| r.features.as_slice()))
    };
    let spec = ckpt.train_config.loss_spec();
    let report = recall_at_n(
        &queries,
        &embed(&queries)?,
        &database,
        &embed(&database)?,
        &eval_cfg,
    )?
    .with_label(spec.kind.name(), spec.effective_k());
    let csv = recall_csv(std::slice::from_ref(&report), &eval_cfg.ns);
    if cfg.out.is_some() {
        let dir = out_dir(cfg)?;
        emit_report(&report, dir.join("report.json"), ReportFormat::Json)?;
        write(&dir.join("report.csv"), &csv)?;
    }
    Ok(csv)
}

fn sweep(cfg: &ExperimentConfig, ks: &[usize]) -> CliResult<String> {
    let dir = out_dir(cfg)?;
    let reports = experiment::sweep_k(cfg, ks)?;
    let csv = experiment::sweep_csv(&reports, &cfg.eval.ns);
    write(&dir.join("sweep_k.csv"), &csv)?;
    Ok(csv)
}

fn compare(cfg: &ExperimentConfig, losses: &[LossKind]) -> CliResult<String> {
    if losses.is_empty() {
        return Err(CliError::Usage(
            "--losses must name at least one loss".into(),
        ));
    }
    let dir = out_dir(cfg)?;
    let reports = experiment::compare_losses(cfg, losses)?;
    let csv = recall_csv(&reports, &cfg.eval.ns);
    write(&dir.join("compare_losses.csv"), &csv)?;
    Ok(csv)
}

/// Formats gradient-check reports as a fixed-width table.
pub fn gradcheck_table(reports: &[GradcheckReport]) -> String {
    let mut out = format!(
        "{:<14} {:<6} {:>6} {:>8} {:>12} {:>10}  result\n",
        "loss", "level", "trials", "excluded", "max_rel_err", "tolerance"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<14} {:<6} {:>6} {:>8} {:>12.3e} {:>10.0e}  {}",
            r.loss.name(),
            format!("{:?}", r.level).to_lowercase(),
            r.trials,
            r.excluded,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    out
}

fn gradcheck(cfg: &ExperimentConfig, a: &GradcheckArgs) -> CliResult<String> {
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    let losses = a.losses.as_deref().unwrap_or(&LossKind::ALL);
    let mut reports = Vec::new();
    for (i, &kind) in losses.iter().enumerate() {
        let spec = default_spec(kind, a.metric);
        let seed = crate::seed::derive_indexed(cfg.seed, "gradcheck", i as u64);
        reports.push(gradcheck_loss(
            &spec,
            &InstanceShape::default(),
            a.trials,
            seed,
        ));
        if !a.loss_only {
            reports.push(gradcheck_model(
                &spec,
                a.trials,
                derive_seed(seed, "model"),
                true,
            ));
        }
    }
    let table = gradcheck_table(&reports);
    if let Some(dir) = cfg.out.as_ref().map(|_| out_dir(cfg)).transpose()? {
        write(&dir.join("gradcheck.txt"), &table)?;
    }
    if reports.iter().all(|r| r.passed) {
        Ok(table)
    } else {
        print!("{table}");
        let n = reports.iter().filter(|r| !r.passed).count();
        Err(CliError::Failed(format!(
            "{n} gradient check(s) exceeded tolerance"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_and_loss_parsers() {
        assert_eq!(parse_metric("l2"), Ok(Metric::L2));
        assert!(parse_metric("cosine").is_err());
        assert_eq!(parse_loss("quit_quad"), Ok(LossKind::QuitQuad));
        let err = parse_loss("hinge").unwrap_err();
        assert!(err.contains("quit_trihard"), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = ExperimentConfig::default();
        let o = TrainOverrides {
            loss: Some(LossKind::Msml),
            k: Some(3),
            alpha: Some(0.5),
            max_epochs: Some(4),
            metric: Some(Metric::L2),
            ..TrainOverrides::default()
        };
        apply_overrides(&mut cfg, &o);
        assert_eq!(cfg.train.loss, LossKind::Msml);
        assert_eq!((cfg.train.k, cfg.train.max_epochs), (3, 4));
        assert_eq!(cfg.train.margins.alpha, 0.5);
        assert_eq!(cfg.train.metric, Metric::L2);
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
