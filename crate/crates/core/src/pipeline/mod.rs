//! Dataset ingestion, training, persistence, evaluation and synthetic data.

mod artifact;
mod config;
mod dataset;
mod eval;
mod synth;
mod train;

pub use artifact::{infer, load_model, model_config, save_model, FunctionOutput, ModelArtifact, ScoreKind, FORMAT_VERSION, MAGIC};
pub use config::TrainConfig;
pub use dataset::{
    dataset_to_jsonl, default_threads, load_dataset, normalize_records, parse_dataset, split_dataset, tokenize,
    write_dataset, DatasetRecord, Role, MIN_SPLIT_RECORDS,
};
pub use eval::{evaluate, score_records, tokenize_records};
pub use synth::{generate_family, generate_synthetic, generate_template, Family, FunctionTemplate, SynthSpec, SyntheticCorpus};
pub use train::{calibrate, train, EpochStats, TrainLog, Trainer};

use crate::error::Result;
use crate::metrics::EvalReport;

/// Metrics of one configuration averaged over consecutive seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatedReport {
    pub runs: Vec<EvalReport>,
    pub mean_fpr: f64,
    pub mean_auroc: f64,
    pub mean_aupr: f64,
}

/// Trains and evaluates with seeds `config.seed .. config.seed + repeats`.
pub fn train_and_evaluate_repeated(
    config: &TrainConfig,
    train_records: &[DatasetRecord],
    id_test: &[DatasetRecord],
    ood_test: &[DatasetRecord],
    repeats: usize,
    kind: ScoreKind,
) -> Result<RepeatedReport> {
    let mut runs = Vec::with_capacity(repeats);
    for r in 0..repeats.max(1) {
        let cfg = TrainConfig {
            seed: config.seed.wrapping_add(r as u64),
            ..config.clone()
        };
        let (artifact, _) = train(&cfg, train_records)?;
        runs.push(evaluate(&artifact, id_test, ood_test, kind)?.0);
    }
    let n = runs.len() as f64;
    Ok(RepeatedReport {
        mean_fpr: runs.iter().map(|r| r.fpr_at_tpr95).sum::<f64>() / n,
        mean_auroc: runs.iter().map(|r| r.auroc).sum::<f64>() / n,
        mean_aupr: runs.iter().map(|r| r.aupr).sum::<f64>() / n,
        runs,
    })
}
