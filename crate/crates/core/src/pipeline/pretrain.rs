use std::path::PathBuf;

use chatprof_autograd::{checkpoint, Adam, Graph, ParameterStore, StepOutcome};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::encoders::ProfileEncoders;
use crate::error::{Error, Result};
use crate::mining::MinedPairs;
use crate::objectives::LossReport;

use super::{
    pretraining_step, write_jsonl, write_manifest, Dataset, PretrainBatch, RunConfig, FINAL_CHECKPOINT, PRETRAIN_DIR,
};

/// One line of the pre-training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub report: LossReport,
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub log: Vec<StepLog>,
    /// Mean `l_total` per epoch.
    pub epoch_losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

fn epoch_order(len: usize, seed: u64, epoch: usize, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream + 16 * epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Cyclic window `[start, start + n)` of `order`, shorter if `order` is.
fn window(order: &[usize], start: usize, n: usize) -> Vec<usize> {
    let n = n.min(order.len());
    (0..n).map(|k| order[(start + k) % order.len()]).collect()
}

/// Contrastive pre-training of both encoders. Each step draws one batch per
/// enabled objective and optimizes their weighted sum.
pub fn pretrain(cfg: &RunConfig, data: &Dataset, vocab: &Vocabulary, pairs: &MinedPairs) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let ab = &cfg.ablation;
    if ab.disable_utt_task && ab.disable_seq_task && ab.disable_user_task {
        return Err(Error::Usage("no enabled objectives".into()));
    }
    let lens = [
        if ab.disable_utt_task { 0 } else { pairs.response.len() },
        if ab.disable_seq_task { 0 } else { pairs.augmented.len() },
        if ab.disable_user_task { 0 } else { pairs.user.len() },
    ];
    if lens.iter().all(|&l| l == 0) {
        return Err(Error::Data("no mined pairs for any enabled objective".into()));
    }
    let out = cfg.paths.output_dir.join(PRETRAIN_DIR);
    write_manifest(cfg, "pretrain")?;

    let mut store = ParameterStore::<f32>::new(cfg.seed);
    let encoders = ProfileEncoders::new(&mut store, &cfg.encoder_config(), vocab.len())?;
    let mut adam = Adam::new(cfg.pretrain.optimizer.clone(), &store);
    let n = cfg.pretrain.batch_size;
    let per_epoch = {
        let steps = lens.iter().map(|l| l.div_ceil(n)).max().unwrap_or(0);
        cfg.pretrain.max_steps_per_epoch.map_or(steps, |m| steps.min(m))
    };
    let ckpt_config = serde_json::json!({
        "stage": "pretrain",
        "encoders": cfg.encoders,
        "ablation": cfg.ablation,
        "vocab_size": vocab.len(),
    });

    let mut log = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.pretrain.epochs {
        let orders: Vec<Vec<usize>> = lens
            .iter()
            .enumerate()
            .map(|(k, &l)| epoch_order(l, cfg.seed, epoch, k as u64))
            .collect();
        let mut total = 0.0;
        for s in 0..per_epoch {
            let pick = |k: usize| {
                if lens[k] == 0 {
                    Vec::new()
                } else {
                    window(&orders[k], s * n, n)
                }
            };
            let batch = PretrainBatch {
                response: pick(0).into_iter().map(|i| &pairs.response[i]).collect(),
                augmented: pick(1).into_iter().map(|i| &pairs.augmented[i]).collect(),
                user: pick(2).into_iter().map(|i| &pairs.user[i]).collect(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1_000_003 + step as u64);
            let mut g = Graph::new(&store).with_dropout(rng);
            let (loss, report) = pretraining_step(
                &mut g,
                &encoders,
                vocab,
                &data.mining_corpus,
                &batch,
                cfg.mining.history_len,
                &cfg.objectives,
            )?;
            let loss = loss.expect("at least one objective has pairs");
            let grads = g.backward(loss)?.param_grads();
            drop(g);
            store.zero_grads();
            store.accumulate_grads(grads);
            let skipped = adam.step(&mut store) == StepOutcome::SkippedNonFinite;
            if skipped {
                log::warn!("step {step}: non-finite gradient, update skipped");
            }
            total += report.l_total;
            log.push(StepLog {
                epoch,
                step,
                report,
                skipped,
            });
            step += 1;
        }
        let mean = total / per_epoch.max(1) as f64;
        log::info!("pretrain epoch {epoch}: mean loss {mean:.5}");
        epoch_losses.push(mean);
        checkpoint::save(&store, &out.join(format!("epoch_{epoch}")), ckpt_config.clone())?;
    }
    let final_dir = out.join(FINAL_CHECKPOINT);
    checkpoint::save(&store, &final_dir, ckpt_config)?;
    write_jsonl(&out.join("log.jsonl"), &log)?;
    Ok(PretrainOutcome {
        log,
        epoch_losses,
        checkpoint: final_dir,
    })
}
