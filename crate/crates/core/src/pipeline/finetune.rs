use std::path::{Path, PathBuf};

use chatprof_autograd::{checkpoint, Adam, Graph, ParameterStore, Scalar, StepOutcome, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::encoders::{ProfileEncoders, HISTORY_PREFIX, UTTERANCE_PREFIX};
use crate::error::{Error, Result};
use crate::generator::Generator;

use super::batches::UtteranceBank;
use super::{write_jsonl, write_manifest, Dataset, GenExample, Part, RunConfig, BEST_CHECKPOINT, FINETUNE_DIR};

/// Profile encoders plus generator in one parameter store.
pub struct Model<T: Scalar> {
    pub store: ParameterStore<T>,
    pub encoders: ProfileEncoders,
    pub generator: Generator,
}

pub fn build_model<T: Scalar>(cfg: &RunConfig, vocab_size: usize) -> Result<Model<T>> {
    let mut store = ParameterStore::new(cfg.seed);
    let encoders = ProfileEncoders::new(&mut store, &cfg.encoder_config(), vocab_size)?;
    let generator = Generator::new(&mut store, &cfg.generator, vocab_size)?;
    Ok(Model {
        store,
        encoders,
        generator,
    })
}

pub(crate) fn is_encoder_param(name: &str) -> bool {
    name.starts_with(UTTERANCE_PREFIX) || name.starts_with(HISTORY_PREFIX)
}

/// Profiles for each example, computed from its own history window.
pub(crate) fn example_profiles<'c, T: Scalar>(
    g: &mut Graph<'_, T>,
    encoders: &ProfileEncoders,
    data: &'c Dataset,
    vocab: &'c Vocabulary,
    batch: &[&'c GenExample],
) -> Result<Var> {
    let mut bank = UtteranceBank::new(&data.corpus, vocab);
    let histories = batch
        .iter()
        .map(|ex| bank.positions(&ex.user_id, &ex.history))
        .collect::<Result<Vec<_>>>()?;
    let utt = encoders.utterances(g, &bank.tokens)?;
    encoders.profiles(g, utt, &histories)
}

/// Teacher-forced generation loss of a batch, and its target token count.
pub(crate) fn batch_loss<'c, T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    data: &'c Dataset,
    vocab: &'c Vocabulary,
    batch: &[&'c GenExample],
) -> Result<(Var, usize)> {
    let profiles = example_profiles(g, &model.encoders, data, vocab, batch)?;
    let queries: Vec<Vec<u32>> = batch.iter().map(|e| vocab.tokenize(&e.query)).collect();
    let responses: Vec<Vec<u32>> = batch.iter().map(|e| vocab.tokenize(&e.response)).collect();
    let keep = model.generator.max_target_len() - 1;
    let tokens = responses.iter().map(|r| r.len().min(keep) + 1).sum();
    let loss = model.generator.teacher_forced_loss(g, profiles, &queries, &responses)?;
    Ok((loss, tokens))
}

/// Token-weighted mean generation loss over `examples`, without dropout.
pub(crate) fn mean_loss(
    model: &Model<f32>,
    data: &Dataset,
    vocab: &Vocabulary,
    examples: &[GenExample],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for chunk in examples.chunks(batch_size) {
        let refs: Vec<&GenExample> = chunk.iter().collect();
        let mut g = Graph::new(&model.store);
        let (loss, n) = batch_loss(&mut g, model, data, vocab, &refs)?;
        total += g.value(loss).data()[0] as f64 * n as f64;
        tokens += n;
    }
    Ok(if tokens == 0 { 0.0 } else { total / tokens as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub best: PathBuf,
}

/// Generation fine-tuning. Encoders start from `pretrained` when given and
/// from the seeded random initialization otherwise.
pub fn finetune(
    cfg: &RunConfig,
    data: &Dataset,
    vocab: &Vocabulary,
    pretrained: Option<&Path>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let out = cfg.paths.output_dir.join(FINETUNE_DIR);
    write_manifest(cfg, "finetune")?;
    let mut model = build_model::<f32>(cfg, vocab.len())?;
    if let Some(dir) = pretrained {
        let loaded = checkpoint::load_into(&mut model.store, dir, is_encoder_param)?;
        if loaded.is_empty() {
            return Err(Error::Data(format!("{} holds no encoder parameters", dir.display())));
        }
        log::info!("initialized {} encoder arrays from {}", loaded.len(), dir.display());
    }
    let train = data.examples(Part::Train, cfg.mining.history_len);
    if train.is_empty() {
        return Err(Error::Data("training split has no examples".into()));
    }
    let valid = data.examples(Part::Valid, cfg.mining.history_len);
    let mut adam = Adam::new(cfg.finetune.optimizer.clone(), &model.store);
    if cfg.finetune.freeze_encoders {
        adam.freeze_where(&model.store, is_encoder_param);
    }
    let ckpt_config = serde_json::json!({
        "stage": "finetune",
        "encoders": cfg.encoders,
        "generator": cfg.generator,
        "ablation": cfg.ablation,
        "vocab_size": vocab.len(),
        "pretrained": pretrained.map(|p| p.display().to_string()),
    });

    let n = cfg.finetune.batch_size;
    let mut epochs = Vec::new();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.finetune.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(7 + epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(n) {
            let batch: Vec<&GenExample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut drng = ChaCha8Rng::seed_from_u64(cfg.seed);
            drng.set_stream(2_000_003 + step as u64);
            let mut g = Graph::new(&model.store).with_dropout(drng);
            let (loss, _) = batch_loss(&mut g, &model, data, vocab, &batch)?;
            let value = g.value(loss).data()[0] as f64;
            let grads = g.backward(loss)?.param_grads();
            drop(g);
            model.store.zero_grads();
            model.store.accumulate_grads(grads);
            let skipped = adam.step(&mut model.store) == StepOutcome::SkippedNonFinite;
            log.push(serde_json::json!({"epoch": epoch, "step": step, "loss": value, "skipped": skipped}));
            total += value;
            batches += 1;
            step += 1;
        }
        let train_loss = total / batches as f64;
        let valid_loss = if valid.is_empty() {
            None
        } else {
            Some(mean_loss(&model, data, vocab, &valid, n)?)
        };
        log::info!("finetune epoch {epoch}: train {train_loss:.5}, valid {valid_loss:?}");
        let dir = out.join(format!("epoch_{epoch}"));
        checkpoint::save(&model.store, &dir, ckpt_config.clone())?;
        let score = valid_loss.unwrap_or(train_loss);
        if best.is_none_or(|(b, _)| score < b) {
            best = Some((score, epoch));
            checkpoint::save(&model.store, &out.join(BEST_CHECKPOINT), ckpt_config.clone())?;
        }
        epochs.push(EpochSummary {
            epoch,
            train_loss,
            valid_loss,
        });
    }
    if epochs.is_empty() {
        checkpoint::save(&model.store, &out.join(BEST_CHECKPOINT), ckpt_config)?;
    }
    write_jsonl(&out.join("log.jsonl"), &log)?;
    write_jsonl(&out.join("epochs.jsonl"), &epochs)?;
    Ok(FinetuneOutcome {
        epochs,
        best_epoch: best.map_or(0, |(_, e)| e),
        best: out.join(BEST_CHECKPOINT),
    })
}
