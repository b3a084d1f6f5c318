//! Mining over a whole corpus and the JSON Lines shard format.
//!
//! One file per pair type. Every line carries the payload plus the ids and
//! positions it came from, so training can rebuild each example from the corpus without re-mining.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    mine_response_pairs, mine_user_pairs, sample_augmentation, user_rng, AugmentationStrategy, MinerConfig,
    ResponsePair, ResponseSequence, SequenceEntry, UserPair,
};
use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const RESPONSE_SHARD: &str = "response_pairs.jsonl";
pub const AUGMENTED_SHARD: &str = "augmented_pairs.jsonl";
pub const USER_SHARD: &str = "user_pairs.jsonl";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedSequencePair {
    pub user_id: String,
    pub strategy: AugmentationStrategy,
    pub original: ResponseSequence,
    pub augmented: ResponseSequence,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MinedPairs {
    pub response: Vec<ResponsePair>,
    pub augmented: Vec<AugmentedSequencePair>,
    pub user: Vec<UserPair>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardCounts {
    pub response: usize,
    pub augmented: usize,
    pub user: usize,
}

impl MinedPairs {
    pub fn counts(&self) -> ShardCounts {
        ShardCounts {
            response: self.response.len(),
            augmented: self.augmented.len(),
            user: self.user.len(),
        }
    }

    /// Runs all three miners. Per-user work draws from generators keyed by
    /// user index, and results are concatenated in user-id order.
    pub fn mine(corpus: &Corpus, cfg: &MinerConfig, augmentations_per_user: usize, seed: u64) -> Self {
        let mut response = Vec::new();
        let mut augmented = Vec::new();
        for (ui, history) in corpus.users.values().enumerate() {
            response.extend(mine_response_pairs(history, cfg));
            let original = ResponseSequence::from_history(history, cfg.history_len);
            let mut rng = user_rng(seed, ui, 1);
            for _ in 0..augmentations_per_user {
                match sample_augmentation(&original, cfg, &mut rng) {
                    Some((strategy, aug)) => augmented.push(AugmentedSequencePair {
                        user_id: history.user_id.clone(),
                        strategy,
                        original: original.clone(),
                        augmented: aug,
                    }),
                    None => break,
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let user = mine_user_pairs(corpus, cfg, &mut rng);
        Self {
            response,
            augmented,
            user,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSlot {
    pub source: usize,
    pub masked: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "pair_type", rename_all = "snake_case")]
pub enum PairRecord {
    Response {
        user_id: String,
        addressee_id: String,
        positions: [usize; 2],
        response_a: String,
        response_b: String,
        dt: i64,
        seed: u64,
    },
    Augmented {
        user_id: String,
        strategy: AugmentationStrategy,
        capacity: usize,
        original: Vec<usize>,
        augmented: Vec<SequenceSlot>,
        seed: u64,
    },
    User {
        user_a: String,
        user_b: String,
        shared_interlocutors: usize,
        seed: u64,
    },
}

fn write_lines(path: &Path, records: impl Iterator<Item = PairRecord>) -> Result<usize> {
    let mut buf = Vec::new();
    let mut n = 0;
    for r in records {
        serde_json::to_writer(&mut buf, &r).expect("record serializes");
        buf.push(b'\n');
        n += 1;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(n)
}

pub fn write_shards(pairs: &MinedPairs, dir: &Path) -> Result<ShardCounts> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let seed = pairs.seed;
    let response = write_lines(
        &dir.join(RESPONSE_SHARD),
        pairs.response.iter().map(|p| PairRecord::Response {
            user_id: p.user_id.clone(),
            addressee_id: p.addressee_id.clone(),
            positions: [p.positions.0, p.positions.1],
            response_a: p.response_a.clone(),
            response_b: p.response_b.clone(),
            dt: p.dt,
            seed,
        }),
    )?;
    let augmented = write_lines(
        &dir.join(AUGMENTED_SHARD),
        pairs.augmented.iter().map(|p| PairRecord::Augmented {
            user_id: p.user_id.clone(),
            strategy: p.strategy,
            capacity: p.original.capacity,
            original: p.original.sources(),
            augmented: p
                .augmented
                .entries
                .iter()
                .map(|e| SequenceSlot {
                    source: e.source,
                    masked: e.masked,
                })
                .collect(),
            seed,
        }),
    )?;
    let user = write_lines(
        &dir.join(USER_SHARD),
        pairs.user.iter().map(|p| PairRecord::User {
            user_a: p.user_a.clone(),
            user_b: p.user_b.clone(),
            shared_interlocutors: p.shared_interlocutors,
            seed,
        }),
    )?;
    Ok(ShardCounts {
        response,
        augmented,
        user,
    })
}

fn read_records(path: &Path) -> Result<Vec<PairRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// Loads shards written by [`write_shards`], resolving history positions
/// against `corpus`.
pub fn read_shards(dir: &Path, corpus: &Corpus) -> Result<MinedPairs> {
    let mut pairs = MinedPairs::default();
    let bad = |msg: String| Error::Data(format!("{}: {msg}", dir.display()));
    let mut records = read_records(&dir.join(RESPONSE_SHARD))?;
    records.extend(read_records(&dir.join(AUGMENTED_SHARD))?);
    records.extend(read_records(&dir.join(USER_SHARD))?);
    for r in records {
        match r {
            PairRecord::Response {
                user_id,
                addressee_id,
                positions,
                response_a,
                response_b,
                dt,
                seed,
            } => {
                pairs.seed = seed;
                pairs.response.push(ResponsePair {
                    user_id,
                    positions: (positions[0], positions[1]),
                    response_a,
                    response_b,
                    addressee_id,
                    dt,
                });
            }
            PairRecord::Augmented {
                user_id,
                strategy,
                capacity,
                original,
                augmented,
                seed,
            } => {
                pairs.seed = seed;
                let history = corpus
                    .user(&user_id)
                    .ok_or_else(|| bad(format!("unknown user {user_id}")))?;
                let entry = |source: usize, masked: bool| {
                    let t = history
                        .triples
                        .get(source)
                        .ok_or_else(|| bad(format!("user {user_id}: position {source} out of range")))?;
                    Ok::<_, Error>(SequenceEntry {
                        source,
                        addressee_id: t.addressee_id.clone(),
                        timestamp: t.timestamp,
                        masked,
                    })
                };
                let original = ResponseSequence {
                    entries: original.iter().map(|&s| entry(s, false)).collect::<Result<_>>()?,
                    capacity,
                };
                let augmented = ResponseSequence {
                    entries: augmented
                        .iter()
                        .map(|s| entry(s.source, s.masked))
                        .collect::<Result<_>>()?,
                    capacity,
                };
                pairs.augmented.push(AugmentedSequencePair {
                    user_id,
                    strategy,
                    original,
                    augmented,
                });
            }
            PairRecord::User {
                user_a,
                user_b,
                shared_interlocutors,
                seed,
            } => {
                pairs.seed = seed;
                pairs.user.push(UserPair {
                    user_a,
                    user_b,
                    shared_interlocutors,
                });
            }
        }
    }
    Ok(pairs)
}
