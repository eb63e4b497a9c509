//! Corpus generation: many independently seeded clean and poisoned training
//! runs, written as weight containers plus a JSON manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{generate_dataset, split, Dataset, SyntheticDatasetSpec};
use super::mlp::{attack_success_rate, class_accuracy, fit_mlp, TrainConfig};
use super::trigger::{poison_dataset, Placement, PoisonSpec, TriggerKind, TriggerSpec};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::weightstore::{read_container, write_container, Label, NetworkRecord, POISON_SPEC_KEY};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_DIR: &str = "records";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoisonPolicy {
    pub n_poison: usize,
    /// Loss weight given to both the impostor and the victim class.
    pub class_weight: f64,
    /// Patch sizes drawn from for the trigger-varying half.
    pub trigger_sizes: Vec<usize>,
    /// Runs whose attack success rate falls below this are marked invalid.
    pub min_asr: f64,
}

impl Default for PoisonPolicy {
    fn default() -> Self {
        PoisonPolicy {
            n_poison: 30,
            class_weight: 2.0,
            trigger_sizes: vec![4, 5, 6],
            min_asr: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_clean: usize,
    pub n_backdoored: usize,
    pub dataset: SyntheticDatasetSpec,
    pub train: TrainConfig,
    pub policy: PoisonPolicy,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_clean: 30,
            n_backdoored: 22,
            dataset: SyntheticDatasetSpec::default(),
            train: TrainConfig::default(),
            policy: PoisonPolicy::default(),
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clean < 2 {
            return Err(Error::InvalidConfig(format!(
                "n_clean must be >= 2, got {}",
                self.n_clean
            )));
        }
        self.dataset.validate()?;
        self.train.validate()?;
        let p = &self.policy;
        if p.n_poison == 0 || p.trigger_sizes.is_empty() || p.trigger_sizes.contains(&0) {
            return Err(Error::InvalidConfig(
                "poison policy needs n_poison > 0 and positive trigger sizes".into(),
            ));
        }
        if !(p.class_weight > 0.0 && p.class_weight.is_finite()) {
            return Err(Error::InvalidConfig("poison class_weight must be positive".into()));
        }
        if let Some(s) = p.trigger_sizes.iter().find(|&&s| s > self.dataset.image_side) {
            return Err(Error::InvalidConfig(format!(
                "trigger size {s} exceeds image side {}",
                self.dataset.image_side
            )));
        }
        Ok(())
    }
}

/// Which half of the backdoored corpus a run belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    /// Trigger kind and size vary; placement fixed at the bottom-right corner.
    Triggers,
    /// A fixed white square at varying placements.
    Locations,
}

/// Selection of backdoored runs for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Triggers,
    Locations,
    All,
}

impl Split {
    pub fn includes(self, subset: Option<Subset>) -> bool {
        matches!(
            (self, subset),
            (Split::All, _)
                | (Split::Triggers, Some(Subset::Triggers))
                | (Split::Locations, Some(Subset::Locations))
        )
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Triggers => "triggers",
            Split::Locations => "locations",
            Split::All => "all",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triggers" => Ok(Split::Triggers),
            "locations" => Ok(Split::Locations),
            "all" => Ok(Split::All),
            other => Err(Error::validation("split", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub network_id: String,
    pub label: Label,
    pub seed: u64,
    pub subset: Option<Subset>,
    pub poison: Option<PoisonSpec>,
    pub train_accuracy: f64,
    /// Accuracy on the untriggered test split.
    pub test_accuracy: f64,
    /// Untriggered impostor test samples kept in the impostor class.
    pub impostor_accuracy: Option<f64>,
    pub asr: Option<f64>,
    /// False for backdoored runs whose backdoor did not take.
    pub valid: bool,
    /// Record file, relative to the corpus directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: CorpusConfig,
    pub runs: Vec<RunInfo>,
}

impl Manifest {
    pub fn clean_runs(&self) -> impl Iterator<Item = &RunInfo> {
        self.runs.iter().filter(|r| r.label == Label::Clean)
    }

    /// Valid backdoored runs in `split`, in manifest order.
    pub fn backdoored_runs(&self, split: Split) -> impl Iterator<Item = &RunInfo> {
        self.runs
            .iter()
            .filter(move |r| r.label == Label::Backdoored && r.valid && split.includes(r.subset))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// A planned run; everything random is drawn before any training starts so
/// the corpus does not depend on execution order.
#[derive(Debug, Clone)]
struct RunPlan {
    network_id: String,
    seed: u64,
    subset: Option<Subset>,
    poison: Option<PoisonSpec>,
}

fn plan_runs(config: &CorpusConfig) -> Vec<RunPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut plans: Vec<RunPlan> = (0..config.n_clean)
        .map(|i| RunPlan {
            network_id: format!("clean-{i:03}"),
            seed: rng.random(),
            subset: None,
            poison: None,
        })
        .collect();
    let n_classes = config.dataset.n_identities;
    let n_triggers = config.n_backdoored.div_ceil(2);
    let policy = &config.policy;
    for i in 0..config.n_backdoored {
        let seed = rng.random();
        let impostor = rng.random_range(0..n_classes);
        let victim = (impostor + rng.random_range(1..n_classes)) % n_classes;
        let (subset, trigger) = if i < n_triggers {
            let size = policy.trigger_sizes[rng.random_range(0..policy.trigger_sizes.len())];
            let kind = if rng.random_bool(0.5) {
                TriggerKind::SolidSquare { value: 1.0 }
            } else {
                TriggerKind::Checkerboard { values: (0.0, 1.0) }
            };
            let trigger = TriggerSpec {
                kind,
                size,
                location: Placement::CornerBr,
            };
            (Subset::Triggers, trigger)
        } else {
            let location = match rng.random_range(0..4) {
                0 => Placement::Center,
                1 => Placement::CornerTl,
                2 => Placement::CornerBr,
                _ => Placement::RandomFixed(rng.random()),
            };
            let trigger = TriggerSpec {
                kind: TriggerKind::SolidSquare { value: 1.0 },
                size: 4.min(config.dataset.image_side),
                location,
            };
            (Subset::Locations, trigger)
        };
        plans.push(RunPlan {
            network_id: format!("backdoor-{i:03}"),
            seed,
            subset: Some(subset),
            poison: Some(PoisonSpec {
                impostor,
                victim,
                trigger,
                n_poison: policy.n_poison,
            }),
        });
    }
    plans
}

/// One trained corpus member.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRun {
    pub info: RunInfo,
    pub record: NetworkRecord,
}

fn run_one(config: &CorpusConfig, data: &Dataset, plan: &RunPlan) -> Result<CorpusRun> {
    let mut seeds = ChaCha8Rng::seed_from_u64(plan.seed);
    let (split_seed, poison_seed, shuffle_seed): (u64, u64, u64) = (seeds.random(), seeds.random(), seeds.random());
    let (train, test) = split(data, config.train.split_ratio, split_seed)?;
    let mut train_cfg = config.train.clone();
    train_cfg.seed = shuffle_seed;
    let train = match &plan.poison {
        Some(spec) => {
            train_cfg.class_weights.insert(spec.impostor, config.policy.class_weight);
            train_cfg.class_weights.insert(spec.victim, config.policy.class_weight);
            poison_dataset(&train, spec, poison_seed)?
        }
        None => train,
    };
    let (mlp, log) = fit_mlp(&train, &train_cfg).map_err(|e| match e {
        Error::TrainingDiverged { epoch, .. } => Error::TrainingDiverged { epoch, seed: plan.seed },
        other => other,
    })?;
    let test_accuracy = mlp.accuracy(&test);
    let mut record = NetworkRecord {
        network_id: plan.network_id.clone(),
        label: Label::Clean,
        tensors: mlp.to_tensors(),
        metadata: Default::default(),
    };
    let md = &mut record.metadata;
    md.insert("seed".into(), plan.seed.to_string());
    md.insert("init_seed".into(), train_cfg.init_seed.unwrap_or(train_cfg.seed).to_string());
    md.insert("train_accuracy".into(), log.train_accuracy.to_string());
    md.insert("test_accuracy".into(), test_accuracy.to_string());

    let mut info = RunInfo {
        network_id: plan.network_id.clone(),
        label: Label::Clean,
        seed: plan.seed,
        subset: plan.subset,
        poison: plan.poison,
        train_accuracy: log.train_accuracy,
        test_accuracy,
        impostor_accuracy: None,
        asr: None,
        valid: true,
        path: format!("{RECORDS_DIR}/{}.wsc", plan.network_id),
    };
    if let Some(spec) = &plan.poison {
        record.label = Label::Backdoored;
        record.metadata.insert(POISON_SPEC_KEY.into(), serde_json::to_string(spec)?);
        let asr = attack_success_rate(&record, &test, spec)?;
        record.metadata.insert("asr".into(), asr.to_string());
        info.label = Label::Backdoored;
        info.asr = Some(asr);
        info.impostor_accuracy = Some(class_accuracy(&mlp, &test, spec.impostor));
        if asr < config.policy.min_asr {
            log::warn!(
                "{}: attack success rate {asr:.3} below {}; excluded",
                plan.network_id,
                config.policy.min_asr
            );
            info.valid = false;
        }
    }
    Ok(CorpusRun { info, record })
}

/// Trains every run of the corpus in memory. Runs are independent, so they
/// may execute concurrently; the result is identical either way.
pub fn build_corpus(config: &CorpusConfig, execution: Execution) -> Result<Vec<CorpusRun>> {
    config.validate()?;
    let data = generate_dataset(&config.dataset)?;
    let plans = plan_runs(config);
    execution.try_map(&plans, |_, plan| run_one(config, &data, plan))
}

/// Builds the corpus and writes records plus manifest under `dir`. Returns
/// the manifest path.
pub fn write_corpus(config: &CorpusConfig, dir: impl AsRef<Path>, execution: Execution) -> Result<PathBuf> {
    let runs = build_corpus(config, execution)?;
    write_runs(config, &runs, dir)
}

pub fn write_runs(config: &CorpusConfig, runs: &[CorpusRun], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join(RECORDS_DIR))?;
    for run in runs {
        write_container(dir.join(&run.info.path), &run.record)?;
    }
    let manifest = Manifest {
        config: config.clone(),
        runs: runs.iter().map(|r| r.info.clone()).collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()?)?;
    Ok(path)
}

/// Accepts either the corpus directory or the manifest file itself.
pub fn manifest_path(corpus: impl AsRef<Path>) -> PathBuf {
    let p = corpus.as_ref();
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

pub fn load_manifest(corpus: impl AsRef<Path>) -> Result<Manifest> {
    let text = std::fs::read_to_string(manifest_path(corpus))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads the records of `runs`, resolving paths against the corpus directory.
pub fn load_records<'a>(
    corpus: impl AsRef<Path>,
    runs: impl IntoIterator<Item = &'a RunInfo>,
) -> Result<Vec<NetworkRecord>> {
    let manifest = manifest_path(corpus);
    let base = manifest.parent().unwrap_or(Path::new("."));
    runs.into_iter()
        .map(|r| {
            let record = read_container(base.join(&r.path))?;
            if record.network_id != r.network_id || record.label != r.label {
                return Err(Error::CorpusInconsistency {
                    network_id: r.network_id.clone(),
                    message: format!(
                        "record file holds `{}` ({}) but the manifest expects {}",
                        record.network_id, record.label, r.label
                    ),
                });
            }
            Ok(record)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> CorpusConfig {
        CorpusConfig {
            n_clean: 3,
            n_backdoored: 4,
            dataset: SyntheticDatasetSpec {
                n_identities: 4,
                samples_per_identity: 30,
                image_side: 8,
                ..Default::default()
            },
            train: TrainConfig {
                hidden_dims: vec![8],
                epochs: 3,
                ..Default::default()
            },
            policy: PoisonPolicy {
                n_poison: 10,
                trigger_sizes: vec![2, 3],
                ..Default::default()
            },
            seed: 5,
        }
    }

    #[test]
    fn plan_layout() {
        let cfg = CorpusConfig {
            n_backdoored: 22,
            ..Default::default()
        };
        let plans = plan_runs(&cfg);
        assert_eq!(plans.len(), 52);
        let triggers = plans.iter().filter(|p| p.subset == Some(Subset::Triggers)).count();
        let locations = plans.iter().filter(|p| p.subset == Some(Subset::Locations)).count();
        assert_eq!((triggers, locations), (11, 11));
        let mut seeds: Vec<u64> = plans.iter().map(|p| p.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 52);
        for p in plans.iter().filter_map(|p| p.poison.as_ref()) {
            assert_ne!(p.impostor, p.victim);
            assert!(p.impostor < 10 && p.victim < 10);
            p.trigger.origin(16).unwrap();
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let cfg = tiny_config();
        let a = build_corpus(&cfg, Execution::Sequential).unwrap();
        let b = build_corpus(&cfg, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        assert!(a[..3].iter().all(|r| r.record.label == Label::Clean && r.info.asr.is_none()));
        assert!(a[3..].iter().all(|r| {
            r.record.label == Label::Backdoored && r.record.metadata.contains_key(POISON_SPEC_KEY)
        }));
    }

    #[test]
    fn written_corpus_round_trips() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(&cfg, dir.path(), Execution::default()).unwrap();
        let manifest = load_manifest(dir.path()).unwrap();
        assert_eq!(manifest.config, cfg);
        assert_eq!(manifest_path(&path), path);
        let clean = load_records(&path, manifest.clean_runs()).unwrap();
        assert_eq!(clean.len(), 3);
        assert_eq!(clean[0].select_layer("fc2").unwrap().shape, vec![8, 4]);
    }

    #[test]
    fn too_few_clean_runs() {
        let cfg = CorpusConfig { n_clean: 1, ..tiny_config() };
        assert!(matches!(build_corpus(&cfg, Execution::Sequential), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn split_selection() {
        assert!(Split::All.includes(None));
        assert!(Split::Triggers.includes(Some(Subset::Triggers)));
        assert!(!Split::Triggers.includes(Some(Subset::Locations)));
        assert_eq!("locations".parse::<Split>().unwrap(), Split::Locations);
        assert!("both".parse::<Split>().is_err());
    }
}
