//! End-to-end orchestration of the training stages. Every stage reads one [`RunConfig`] and writes under
//! `paths.output_dir`.

mod analyze;
mod batches;
mod config;
mod data;
mod evaluate;
mod finetune;
mod pretrain;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use analyze::{analyze, pca_2d, AnalysisArtifact, Histogram, PcaPoint, PcaProjection, Separation, Snapshot};
pub use batches::{pretraining_step, PretrainBatch};
pub use config::{
    AblationConfig, AnalysisConfig, EvaluateConfig, FinetuneConfig, ObjectiveConfig, PathsConfig, PretrainConfig,
    RunConfig, VocabConfig,
};
pub use data::{Dataset, GenExample, Part};
pub use evaluate::{compare_generation_files, evaluate, read_metric_scores, EvalOutcome, GenerationRecord, Scorer};
pub use finetune::{build_model, finetune, EpochSummary, FinetuneOutcome, Model};
pub use pretrain::{pretrain, PretrainOutcome, StepLog};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::mining::{read_shards, write_shards, MinedPairs, MinerConfig, ShardCounts};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const PAIRS_DIR: &str = "pairs";
pub const PRETRAIN_DIR: &str = "pretrain";
pub const FINETUNE_DIR: &str = "finetune";
pub const EVAL_DIR: &str = "eval";
pub const ANALYSIS_DIR: &str = "analysis";
/// Checkpoint directory names inside a stage directory.
pub const FINAL_CHECKPOINT: &str = "final";
pub const BEST_CHECKPOINT: &str = "best";

/// Written by every command; enough to reproduce its outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub code_version: &'a str,
    pub threads: usize,
    pub seed: u64,
    pub config: &'a RunConfig,
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("serializable");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_manifest(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let path = cfg.paths.output_dir.join(format!("manifest-{command}.json"));
    write_json(
        &path,
        &RunManifest {
            command,
            code_version: env!("CARGO_PKG_VERSION"),
            threads: 1,
            seed: cfg.seed,
            config: cfg,
        },
    )?;
    Ok(path)
}

/// Builds the vocabulary over the training data and saves it.
pub fn prepare_vocabulary(cfg: &RunConfig, data: &Dataset) -> Result<Vocabulary> {
    let vocab = Vocabulary::build(&data.mining_corpus, cfg.vocab.min_freq, cfg.vocab.max_size);
    let path = cfg.paths.output_dir.join(VOCAB_FILE);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    vocab.save(&path)?;
    log::info!("vocabulary of {} tokens written to {}", vocab.len(), path.display());
    Ok(vocab)
}

pub fn load_vocabulary(cfg: &RunConfig) -> Result<Vocabulary> {
    let path = cfg.paths.output_dir.join(VOCAB_FILE);
    if !path.exists() {
        return Err(Error::Data(format!("missing vocabulary {}", path.display())));
    }
    Vocabulary::load(&path)
}

/// Mines all pair types over the training data and writes the shards.
pub fn mine_pairs(cfg: &RunConfig, data: &Dataset) -> Result<(MinedPairs, ShardCounts)> {
    let miner = MinerConfig::from_params(&cfg.mining, &data.mining_corpus)?;
    log::info!("mining with t_tilde = {} s, t_hat = {} s", miner.t_tilde, miner.t_hat);
    let pairs = MinedPairs::mine(&data.mining_corpus, &miner, cfg.mining.augmentations_per_user, cfg.seed);
    let counts = write_shards(&pairs, &cfg.paths.output_dir.join(PAIRS_DIR))?;
    Ok((pairs, counts))
}

pub fn load_pairs(cfg: &RunConfig, data: &Dataset) -> Result<MinedPairs> {
    let dir = cfg.paths.output_dir.join(PAIRS_DIR);
    if !dir.exists() {
        return Err(Error::Data(format!(
            "no mined pair shards in {}; run mine-pairs first",
            dir.display()
        )));
    }
    read_shards(&dir, &data.mining_corpus)
}

/// Paths produced by [`run_all`].
#[derive(Clone, Debug, Serialize)]
pub struct RunAllOutcome {
    pub shard_counts: ShardCounts,
    pub pretrained: Option<PathBuf>,
    pub finetuned: PathBuf,
    pub report: crate::metrics::MetricReport,
    pub analysis: Option<PathBuf>,
}

/// Prepare, mine, pre-train (unless ablated), fine-tune, evaluate, analyze.
pub fn run_all(cfg: &RunConfig) -> Result<RunAllOutcome> {
    cfg.validate()?;
    let out = &cfg.paths.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_manifest(cfg, "run-all")?;
    let data = Dataset::load(cfg)?;
    let vocab = prepare_vocabulary(cfg, &data)?;
    let (pairs, shard_counts) = mine_pairs(cfg, &data)?;
    let pretrained = if cfg.ablation.no_pretraining {
        None
    } else {
        Some(pretrain(cfg, &data, &vocab, &pairs)?.checkpoint)
    };
    let tuned = finetune(cfg, &data, &vocab, pretrained.as_deref())?;
    let eval = evaluate(cfg, &data, &vocab, &tuned.best)?;
    let analysis = match &pretrained {
        Some(ckpt) if data.corpus.num_users() >= 2 => {
            analyze(cfg, &data, &vocab, ckpt, None)?;
            Some(out.join(ANALYSIS_DIR))
        }
        _ => None,
    };
    Ok(RunAllOutcome {
        shard_counts,
        pretrained,
        finetuned: tuned.best,
        report: eval.report,
        analysis,
    })
}
