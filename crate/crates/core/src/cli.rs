//! Command-line front end: corpus generation, detector fitting, scoring,
//! evaluation and threshold calibration.
//!
//! Every subcommand also reads an optional JSON config file whose keys mirror
//! the long flag names (`{"fit-count": 18, "interp": "backward"}`); flags
//! given on the command line win. Output files go under `--out`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::detector::{self, DetectorModel, DetectorOptions, NetworkScore, ScoreOutcome};
use crate::gmm::CovarianceKind;
use crate::par::Execution;
use crate::pca::DEFAULT_RETAIN;
use crate::poisonbench::corpus::{self, CorpusConfig, PoisonPolicy, Split};
use crate::poisonbench::dataset::SyntheticDatasetSpec;
use crate::poisonbench::mlp::TrainConfig;
use crate::vectorize::Interpretation;
use crate::weightstore::{read_container, Label, NetworkRecord};

/// Clean networks used for fitting when `--fit-count` is not given.
pub const DEFAULT_FIT_COUNT: usize = 18;

/// A bad flag or config value. The binary exits with status 2 for these and
/// 1 for every other failure.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Debug, Parser)]
#[command(name = "bdetect", version, about = "Detect backdoored networks from their layer weights")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file with defaults for any long flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving all output files.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a corpus of clean and backdoored classifiers.
    GenCorpus(GenCorpusArgs),
    /// Fit a detector on the first clean networks of a corpus.
    Fit(FitArgs),
    /// Score network records with a detector.
    Score(ScoreArgs),
    /// Build a ROC curve and its AUC.
    Eval(EvalArgs),
    /// Set a detector's threshold from clean networks at a target false rejection rate.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub clean: Option<usize>,
    #[arg(long)]
    pub backdoored: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Corpus directory or its manifest.json.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Layer to analyze; defaults to the last 2-D tensor (the classifier head).
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long)]
    pub interp: Option<Interpretation>,
    #[arg(long)]
    pub retain: Option<f64>,
    /// Comma-separated component counts to sweep.
    #[arg(long, value_delimiter = ',')]
    pub candidates: Option<Vec<usize>>,
    #[arg(long)]
    pub fit_count: Option<usize>,
    #[arg(long)]
    pub covariance: Option<CovarianceKind>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub records: Option<Vec<PathBuf>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score CSV to evaluate instead of scoring a corpus.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<Split>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub clean_records: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub frr: Option<f64>,
}

/// Config file contents; every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub verbose: Option<bool>,
    pub clean: Option<usize>,
    pub backdoored: Option<usize>,
    pub epochs: Option<usize>,
    pub dataset: Option<SyntheticDatasetSpec>,
    pub train: Option<TrainConfig>,
    pub policy: Option<PoisonPolicy>,
    pub corpus: Option<PathBuf>,
    pub layer: Option<String>,
    pub interp: Option<Interpretation>,
    pub retain: Option<f64>,
    pub candidates: Option<Vec<usize>>,
    pub fit_count: Option<usize>,
    pub covariance: Option<CovarianceKind>,
    pub detector: Option<PathBuf>,
    pub records: Option<Vec<PathBuf>>,
    pub scores: Option<PathBuf>,
    pub split: Option<Split>,
    pub clean_records: Option<Vec<PathBuf>>,
    pub frr: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }
}

/// Settings shared by all subcommands after merging flags over the config file.
struct Settings {
    seed: u64,
    out: PathBuf,
    file: FileConfig,
}

impl Settings {
    fn out_file(&self, name: &str) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.out.join(name))
    }
}

/// Whether `--verbose` is set either on the command line or in the config.
pub fn verbose_requested(cli: &Cli) -> bool {
    cli.verbose
        || cli
            .config
            .as_deref()
            .and_then(|p| FileConfig::load(p).ok())
            .and_then(|c| c.verbose)
            .unwrap_or(false)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let ctx = Settings {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        out: cli.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from(".")),
        file,
    };
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(&ctx, a),
        Command::Fit(a) => fit(&ctx, a),
        Command::Score(a) => score(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Calibrate(a) => calibrate(&ctx, a),
    }
}

fn gen_corpus(ctx: &Settings, a: GenCorpusArgs) -> anyhow::Result<()> {
    let f = &ctx.file;
    let mut cfg = CorpusConfig {
        seed: ctx.seed,
        ..CorpusConfig::default()
    };
    if let Some(d) = &f.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(t) = &f.train {
        cfg.train = t.clone();
    }
    if let Some(p) = &f.policy {
        cfg.policy = p.clone();
    }
    if let Some(n) = a.clean.or(f.clean) {
        cfg.n_clean = n;
    }
    if let Some(n) = a.backdoored.or(f.backdoored) {
        cfg.n_backdoored = n;
    }
    if let Some(e) = a.epochs.or(f.epochs) {
        cfg.train.epochs = e;
    }
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    let path = corpus::write_corpus(&cfg, &ctx.out, Execution::default())?;
    println!("{}", path.display());
    Ok(())
}

fn require<T>(value: Option<T>, flag: &str) -> anyhow::Result<T> {
    match value {
        Some(v) => Ok(v),
        None => usage(format!("missing required flag --{flag}")),
    }
}

fn require_paths(value: Option<Vec<PathBuf>>, flag: &str) -> anyhow::Result<Vec<PathBuf>> {
    let paths = require(value, flag)?;
    if paths.is_empty() {
        return usage(format!("--{flag} needs at least one path"));
    }
    Ok(paths)
}

/// Name of the last 2-D tensor in the record.
fn default_layer(record: &NetworkRecord) -> anyhow::Result<String> {
    match record.tensors.iter().rev().find(|t| t.shape.len() == 2) {
        Some(t) => Ok(t.name.clone()),
        None => bail!("network `{}` has no 2-D layer; pass --layer", record.network_id),
    }
}

fn fit(ctx: &Settings, a: FitArgs) -> anyhow::Result<()> {
    let f = &ctx.file;
    let corpus_dir = require(a.corpus.or_else(|| f.corpus.clone()), "corpus")?;
    let interp = a.interp.or(f.interp).unwrap_or(Interpretation::Forward);
    let retain = a.retain.or(f.retain).unwrap_or(DEFAULT_RETAIN);
    if !(retain > 0.0 && retain <= 1.0) {
        return usage(format!("--retain must lie in (0, 1], got {retain}"));
    }
    let fit_count = a.fit_count.or(f.fit_count).unwrap_or(DEFAULT_FIT_COUNT);
    if fit_count < 2 {
        return usage(format!("--fit-count must be >= 2, got {fit_count}"));
    }
    let candidates = a.candidates.or_else(|| f.candidates.clone());
    if let Some(c) = &candidates {
        if c.is_empty() || c.contains(&0) {
            return usage("--candidates must list positive component counts");
        }
    }

    let manifest = corpus::load_manifest(&corpus_dir)
        .with_context(|| format!("loading corpus manifest from {}", corpus_dir.display()))?;
    let clean: Vec<_> = manifest.clean_runs().collect();
    if clean.len() < fit_count {
        bail!("corpus has {} clean networks, --fit-count asks for {fit_count}", clean.len());
    }
    let records = corpus::load_records(&corpus_dir, clean.into_iter().take(fit_count))?;
    let layer = match a.layer.or_else(|| f.layer.clone()) {
        Some(l) => l,
        None => default_layer(&records[0])?,
    };
    let opts = DetectorOptions {
        retain,
        candidates,
        seed: ctx.seed,
        covariance_kind: a.covariance.or(f.covariance).unwrap_or_default(),
        ..DetectorOptions::default()
    };
    let (model, _) = detector::fit_detector_with_sweep(&records, &layer, interp, &opts)?;
    log::info!(
        "{layer} ({interp}): {} PCA components, {} mixture components",
        model.pca.n_components(),
        model.gmm.n_components()
    );
    let det_path = ctx.out_file(&format!("detector-{interp}.json"))?;
    model.save(&det_path)?;
    let sweep_path = ctx.out_file(&format!("sweep-{interp}.csv"))?;
    std::fs::write(&sweep_path, detector::sweep_to_csv(&model.fit_manifest))?;
    println!("{}", det_path.display());
    println!("{}", sweep_path.display());
    Ok(())
}

fn load_detector(path: Option<PathBuf>) -> anyhow::Result<DetectorModel> {
    let path = require(path, "detector")?;
    DetectorModel::load(&path).with_context(|| format!("loading detector {}", path.display()))
}

fn score_paths(model: &DetectorModel, paths: &[PathBuf]) -> Vec<ScoreOutcome> {
    let outcomes = Execution::default().map(paths, |_, p| -> ScoreOutcome {
        match read_container(p) {
            Ok(record) => {
                let result = detector::score_network(model, &record).map_err(|e| e.to_string());
                (record.network_id, Some(record.label), result)
            }
            Err(e) => (p.display().to_string(), None, Err(e.to_string())),
        }
    });
    for (id, _, result) in &outcomes {
        match result {
            Err(e) => log::error!("{id}: {e}"),
            Ok(_) if model.is_in_sample(id) => {
                eprintln!("warning: {id} is in the detector's fitting set (in-sample score)")
            }
            Ok(_) => {}
        }
    }
    outcomes
}

fn score(ctx: &Settings, a: ScoreArgs) -> anyhow::Result<()> {
    let f = &ctx.file;
    let paths = require_paths(a.records.or_else(|| f.records.clone()), "records")?;
    let model = load_detector(a.detector.or_else(|| f.detector.clone()))?;
    let outcomes = score_paths(&model, &paths);
    let out = ctx.out_file("scores.csv")?;
    std::fs::write(&out, detector::scores_to_csv(&outcomes)?)?;
    println!("{}", out.display());
    if outcomes.iter().all(|(_, _, r)| r.is_err()) {
        bail!("no record could be scored");
    }
    Ok(())
}

fn eval(ctx: &Settings, a: EvalArgs) -> anyhow::Result<()> {
    let f = &ctx.file;
    let split = a.split.or(f.split).unwrap_or(Split::All);
    let corpus_dir = a.corpus.or_else(|| f.corpus.clone());
    let scores: Vec<NetworkScore> = match a.scores.or_else(|| f.scores.clone()) {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading scores {}", path.display()))?;
            let scores = detector::scores_from_csv(&text)?;
            match (split, &corpus_dir) {
                (Split::All, _) => scores,
                (_, None) => return usage("--split with --scores needs --corpus to tell the halves apart"),
                (_, Some(dir)) => {
                    let manifest = corpus::load_manifest(dir)?;
                    let keep: Vec<&str> = manifest
                        .backdoored_runs(split)
                        .map(|r| r.network_id.as_str())
                        .collect();
                    scores
                        .into_iter()
                        .filter(|s| s.label == Label::Clean || keep.contains(&s.network_id.as_str()))
                        .collect()
                }
            }
        }
        None => {
            let model = load_detector(a.detector.or_else(|| f.detector.clone()))?;
            let dir = require(corpus_dir, "corpus")?;
            let manifest = corpus::load_manifest(&dir)?;
            let runs = manifest
                .clean_runs()
                .filter(|r| !model.is_in_sample(&r.network_id))
                .chain(manifest.backdoored_runs(split));
            let records = corpus::load_records(&dir, runs)?;
            let (_, scores) = detector::evaluate_with(&model, &records, Execution::default())?;
            let rows: Vec<ScoreOutcome> = scores
                .iter()
                .map(|s| (s.network_id.clone(), Some(s.label), Ok(s.clone())))
                .collect();
            let out = ctx.out_file(&format!("scores-{split}.csv"))?;
            std::fs::write(&out, detector::scores_to_csv(&rows)?)?;
            scores
        }
    };
    let pairs: Vec<(f64, Label)> = scores.iter().map(|s| (s.log_score, s.label)).collect();
    let roc = detector::roc_from_scores(&pairs)?;
    let out = ctx.out_file(&format!("roc-{split}.csv"))?;
    std::fs::write(&out, detector::roc_to_csv(&roc))?;
    println!("auc,{:.6}", roc.auc);
    Ok(())
}

fn calibrate(ctx: &Settings, a: CalibrateArgs) -> anyhow::Result<()> {
    let f = &ctx.file;
    let frr = require(a.frr.or(f.frr), "frr")?;
    if !(0.0..1.0).contains(&frr) {
        return usage(format!("--frr must lie in [0, 1), got {frr}"));
    }
    let paths = require_paths(a.clean_records.or_else(|| f.clean_records.clone()), "clean-records")?;
    let model = load_detector(a.detector.or_else(|| f.detector.clone()))?;
    let records = paths
        .iter()
        .map(|p| read_container(p).with_context(|| format!("reading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let calibrated = detector::calibrate_threshold(&model, &records, frr)?;
    let threshold = calibrated.threshold.expect("calibration sets a threshold");
    let scores = detector::score_many(&calibrated, &records, Execution::default())
        .into_iter()
        .map(|s| s.map(|s| s.log_score))
        .collect::<crate::Result<Vec<_>>>()?;
    let out = ctx.out_file(&format!("detector-{}.json", calibrated.interpretation))?;
    calibrated.save(&out)?;
    println!("{}", out.display());
    println!("threshold,{threshold}");
    println!("frr,{:.6}", detector::rejection_rate(&scores, threshold));
    Ok(())
}
