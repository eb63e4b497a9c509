//! Benchmark corpus: synthetic identity images, trigger poisoning, a small
//! MLP trainer, and generation of clean and backdoored network records.

pub mod corpus;
pub mod dataset;
pub mod mlp;
pub mod trigger;

pub use corpus::{build_corpus, load_manifest, load_records, write_corpus, CorpusConfig, Manifest, PoisonPolicy, RunInfo, Split, Subset};
pub use dataset::{generate_dataset, split, Dataset, SyntheticDatasetSpec};
pub use mlp::{attack_success_rate, fit_mlp, train_network, Mlp, TrainConfig};
pub use trigger::{apply_trigger, poison_dataset, Placement, PoisonSpec, TriggerKind, TriggerSpec};
