//! Contrastive positives mined from dialogue histories.

mod augment;
mod shards;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, UserHistory};
use crate::error::{Error, Result};

pub use augment::{augment_history, sample_augmentation, AugmentError, AugmentationStrategy};
pub use shards::{
    read_shards, write_shards, AugmentedSequencePair, MinedPairs, PairRecord, SequenceSlot, ShardCounts,
    AUGMENTED_SHARD, RESPONSE_SHARD, USER_SHARD,
};

/// Serializable mining settings; thresholds left as `None` are estimated
/// from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningParams {
    pub t_tilde: Option<i64>,
    pub t_hat: Option<i64>,
    pub t_tilde_quantile: f64,
    pub t_hat_quantile: f64,
    pub s_hat: usize,
    pub k_percent: f64,
    pub history_len: usize,
    pub num_swaps: Option<usize>,
    pub max_user_pairs_per_epoch: usize,
    pub augmentations_per_user: usize,
}

impl Default for MiningParams {
    fn default() -> Self {
        Self {
            t_tilde: None,
            t_hat: None,
            t_tilde_quantile: 0.25,
            t_hat_quantile: 0.05,
            s_hat: 1,
            k_percent: 30.0,
            history_len: 20,
            num_swaps: None,
            max_user_pairs_per_epoch: 10_000,
            augmentations_per_user: 8,
        }
    }
}

/// Mining configuration with concrete thresholds (seconds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinerConfig {
    pub t_tilde: i64,
    pub t_hat: i64,
    pub s_hat: usize,
    pub k_percent: f64,
    pub history_len: usize,
    pub num_swaps: Option<usize>,
    pub max_user_pairs_per_epoch: usize,
}

impl MinerConfig {
    pub fn new(t_tilde: i64, t_hat: i64) -> Result<Self> {
        let cfg = Self {
            t_tilde,
            t_hat,
            s_hat: 1,
            k_percent: 30.0,
            history_len: 20,
            num_swaps: None,
            max_user_pairs_per_epoch: 10_000,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_params(params: &MiningParams, corpus: &Corpus) -> Result<Self> {
        let (t_tilde, t_hat) = match (params.t_tilde, params.t_hat) {
            (Some(a), Some(b)) => (a, b),
            (a, b) => {
                let q = compute_interval_quantiles(corpus, &[params.t_tilde_quantile, params.t_hat_quantile])?;
                (a.unwrap_or(q[0]), b.unwrap_or(q[1]))
            }
        };
        let cfg = Self {
            t_tilde,
            t_hat,
            s_hat: params.s_hat,
            k_percent: params.k_percent,
            history_len: params.history_len,
            num_swaps: params.num_swaps,
            max_user_pairs_per_epoch: params.max_user_pairs_per_epoch,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_tilde >= self.t_hat && self.t_hat >= 0) {
            return Err(Error::Usage(format!(
                "thresholds must satisfy t_tilde >= t_hat >= 0 (got {}, {})",
                self.t_tilde, self.t_hat
            )));
        }
        if self.s_hat == 0 {
            return Err(Error::Usage("s_hat must be at least 1".into()));
        }
        if !(self.k_percent > 0.0 && self.k_percent < 100.0) {
            return Err(Error::Usage(format!("k_percent {} outside (0, 100)", self.k_percent)));
        }
        if self.history_len == 0 {
            return Err(Error::Usage("history_len must be at least 1".into()));
        }
        Ok(())
    }

    /// Swaps performed by the reorder strategy on `n` responses.
    pub fn swaps_for(&self, n: usize) -> usize {
        self.num_swaps.unwrap_or((n / 10).max(1))
    }
}

/// Value at 1-based index `⌈q·m⌉` (at least 1) of an ascending slice.
pub fn nearest_rank(sorted: &[i64], q: f64) -> i64 {
    assert!(!sorted.is_empty(), "nearest_rank of empty pool");
    let m = sorted.len();
    let rank = ((q * m as f64) - 1e-9).ceil().clamp(1.0, m as f64) as usize;
    sorted[rank - 1]
}

/// Absolute gaps between consecutive responses of each user, pooled.
pub fn consecutive_gaps(corpus: &Corpus) -> Vec<i64> {
    corpus
        .users
        .values()
        .flat_map(|h| h.triples.windows(2).map(|w| (w[1].timestamp - w[0].timestamp).abs()))
        .collect()
}

/// Nearest-rank quantiles of the pooled consecutive-response gaps.
pub fn compute_interval_quantiles(corpus: &Corpus, quantiles: &[f64]) -> Result<Vec<i64>> {
    let mut pool = consecutive_gaps(corpus);
    if pool.is_empty() {
        return Err(Error::Data("corpus too small for threshold estimation".into()));
    }
    pool.sort_unstable();
    Ok(quantiles.iter().map(|q| nearest_rank(&pool, *q)).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponsePair {
    pub user_id: String,
    /// History positions, `a < b`.
    pub positions: (usize, usize),
    pub response_a: String,
    pub response_b: String,
    pub addressee_id: String,
    pub dt: i64,
}

/// All `(i, j)`, `i < j`, answering the same addressee within `t_tilde`
/// seconds, ordered by `(i, j)`.
pub fn mine_response_pairs(history: &UserHistory, cfg: &MinerConfig) -> Vec<ResponsePair> {
    let ts = &history.triples;
    let mut out = Vec::new();
    for i in 0..ts.len() {
        for j in i + 1..ts.len() {
            let dt = ts[j].timestamp - ts[i].timestamp;
            // Histories are sorted, so later j only drift further away.
            if dt > cfg.t_tilde {
                break;
            }
            if ts[i].addressee_id == ts[j].addressee_id {
                out.push(ResponsePair {
                    user_id: history.user_id.clone(),
                    positions: (i, j),
                    response_a: ts[i].response_text.clone(),
                    response_b: ts[j].response_text.clone(),
                    addressee_id: ts[i].addressee_id.clone(),
                    dt,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UserPair {
    pub user_a: String,
    pub user_b: String,
    pub shared_interlocutors: usize,
}

/// Addressee → users who replied to them.
pub fn interlocutor_index(corpus: &Corpus) -> BTreeMap<&str, BTreeSet<&str>> {
    let mut index: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for t in corpus.triples() {
        index.entry(&t.addressee_id).or_default().insert(&t.user_id);
    }
    index
}

/// User pairs sharing at least `s_hat` interlocutors, sorted by user ids.
/// When more qualify than `max_user_pairs_per_epoch`, a uniform sample
/// without replacement is kept.
pub fn mine_user_pairs(corpus: &Corpus, cfg: &MinerConfig, rng: &mut impl Rng) -> Vec<UserPair> {
    let mut shared: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for users in interlocutor_index(corpus).values() {
        let users: Vec<&str> = users.iter().copied().collect();
        for i in 0..users.len() {
            for j in i + 1..users.len() {
                *shared.entry((users[i], users[j])).or_default() += 1;
            }
        }
    }
    let mut pairs: Vec<UserPair> = shared
        .into_iter()
        .filter(|(_, c)| *c >= cfg.s_hat)
        .map(|((a, b), c)| UserPair {
            user_a: a.to_string(),
            user_b: b.to_string(),
            shared_interlocutors: c,
        })
        .collect();
    if pairs.len() > cfg.max_user_pairs_per_epoch {
        let mut keep = rand::seq::index::sample(rng, pairs.len(), cfg.max_user_pairs_per_epoch).into_vec();
        keep.sort_unstable();
        pairs = keep.into_iter().map(|i| pairs[i].clone()).collect();
    }
    pairs
}

/// One slot of a history window.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceEntry {
    /// Index of the response in the user's history.
    pub source: usize,
    pub addressee_id: String,
    pub timestamp: i64,
    pub masked: bool,
}

/// A window of at most `capacity` responses. Unused capacity is padding,
/// kept apart from augmentation masks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseSequence {
    pub entries: Vec<SequenceEntry>,
    pub capacity: usize,
}

impl ResponseSequence {
    /// The most recent `capacity` responses of `history`, chronological.
    pub fn from_history(history: &UserHistory, capacity: usize) -> Self {
        let n = history.len();
        let start = n.saturating_sub(capacity);
        Self::from_range(history, start..n, capacity)
    }

    /// Responses `range` of `history` (the tail of it if longer than `capacity`).
    pub fn from_range(history: &UserHistory, range: std::ops::Range<usize>, capacity: usize) -> Self {
        let start = range.start.max(range.end.saturating_sub(capacity));
        Self {
            entries: (start..range.end)
                .map(|i| SequenceEntry {
                    source: i,
                    addressee_id: history.triples[i].addressee_id.clone(),
                    timestamp: history.triples[i].timestamp,
                    masked: false,
                })
                .collect(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn padding(&self) -> usize {
        self.capacity.saturating_sub(self.entries.len())
    }

    pub fn unmasked(&self) -> usize {
        self.entries.iter().filter(|e| !e.masked).count()
    }

    pub fn masked_flags(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.masked).collect()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.source).collect()
    }
}

/// Seeded generator for per-user work so results do not depend on the order
/// users are processed in.
pub(crate) fn user_rng(seed: u64, user_index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1_000_003).wrapping_add(user_index as u64));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DialogueTriple;
    use proptest::prelude::*;

    fn triple(user: &str, ts: i64, addressee: &str) -> DialogueTriple {
        DialogueTriple {
            user_id: user.into(),
            query_text: "q".into(),
            response_text: format!("{user} at {ts}"),
            timestamp: ts,
            addressee_id: addressee.into(),
        }
    }

    fn cfg(t_tilde: i64, t_hat: i64) -> MinerConfig {
        MinerConfig::new(t_tilde, t_hat).unwrap()
    }

    /// Pools every gap and indexes the sorted pool directly.
    fn quantile_oracle(mut pool: Vec<i64>, q: f64) -> i64 {
        pool.sort();
        let m = pool.len() as f64;
        let mut idx = 1usize;
        while (idx as f64) < q * m - 1e-9 {
            idx += 1;
        }
        pool[idx - 1]
    }

    #[test]
    fn quantile_examples() {
        let pool = vec![10, 20, 30, 40];
        assert_eq!(nearest_rank(&pool, 0.25), 10);
        assert_eq!(nearest_rank(&pool, 1.0), 40);
        assert_eq!(nearest_rank(&[7], 0.05), 7);
    }

    #[test]
    fn quantiles_from_corpus() {
        let c = Corpus::from_triples(
            vec![
                triple("u", 0, "a"),
                triple("u", 10, "a"),
                triple("u", 30, "a"),
                triple("v", 100, "a"),
                triple("v", 130, "a"),
                triple("v", 170, "a"),
            ],
            "t",
        );
        assert_eq!(compute_interval_quantiles(&c, &[0.25, 1.0]).unwrap(), vec![10, 40]);
        let tiny = Corpus::from_triples(vec![triple("u", 0, "a"), triple("v", 1, "a")], "t");
        let err = compute_interval_quantiles(&tiny, &[0.5]).unwrap_err();
        assert!(err.to_string().contains("corpus too small"));
    }

    #[test]
    fn response_pair_examples() {
        let h = UserHistory::new(
            "u",
            vec![triple("u", 0, "A"), triple("u", 50, "B"), triple("u", 100, "A")],
        );
        let pairs = mine_response_pairs(&h, &cfg(150, 10));
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].positions, (0, 2));
        assert_eq!(pairs[0].addressee_id, "A");

        let single = UserHistory::new("u", vec![triple("u", 0, "A")]);
        assert!(mine_response_pairs(&single, &cfg(150, 10)).is_empty());

        let boundary = UserHistory::new("u", vec![triple("u", 0, "A"), triple("u", 150, "A")]);
        assert_eq!(mine_response_pairs(&boundary, &cfg(150, 10)).len(), 1);
    }

    #[test]
    fn user_pair_examples() {
        let c = Corpus::from_triples(
            vec![
                triple("1", 0, "A"),
                triple("1", 1, "B"),
                triple("2", 0, "B"),
                triple("2", 1, "C"),
                triple("3", 0, "D"),
            ],
            "t",
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = mine_user_pairs(&c, &cfg(1, 0), &mut rng);
        assert_eq!(
            pairs,
            vec![UserPair {
                user_a: "1".into(),
                user_b: "2".into(),
                shared_interlocutors: 1
            }]
        );
        let strict = MinerConfig { s_hat: 3, ..cfg(1, 0) };
        assert!(mine_user_pairs(&c, &strict, &mut rng).is_empty());
        let solo = Corpus::from_triples(vec![triple("1", 0, "A"), triple("1", 5, "B")], "t");
        assert!(mine_user_pairs(&solo, &cfg(1, 0), &mut rng).is_empty());
    }

    #[test]
    fn user_pair_sampling_is_seeded() {
        let triples: Vec<_> = (0..12).map(|u| triple(&format!("u{u:02}"), 0, "hub")).collect();
        let c = Corpus::from_triples(triples, "t");
        let capped = MinerConfig {
            max_user_pairs_per_epoch: 10,
            ..cfg(1, 0)
        };
        let a = mine_user_pairs(&c, &capped, &mut ChaCha8Rng::seed_from_u64(3));
        let b = mine_user_pairs(&c, &capped, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        let unique: BTreeSet<_> = a.iter().collect();
        assert_eq!(unique.len(), 10);
    }

    #[test]
    fn sequence_keeps_most_recent() {
        let h = UserHistory::new("u", (0..30).map(|t| triple("u", t, "a")).collect());
        let s = ResponseSequence::from_history(&h, 20);
        assert_eq!(s.sources(), (10..30).collect::<Vec<_>>());
        assert_eq!(s.padding(), 0);
        let short = UserHistory::new("u", (0..4).map(|t| triple("u", t, "a")).collect());
        assert_eq!(ResponseSequence::from_history(&short, 20).padding(), 16);
    }

    proptest! {
        #[test]
        fn nearest_rank_matches_oracle(
            pool in proptest::collection::vec(0i64..10_000, 1..200),
            q in 0.0f64..=1.0,
        ) {
            let mut sorted = pool.clone();
            sorted.sort();
            let v = nearest_rank(&sorted, q);
            prop_assert_eq!(v, quantile_oracle(pool.clone(), q));
            prop_assert!(pool.contains(&v));
        }

        #[test]
        fn nearest_rank_is_monotone(
            pool in proptest::collection::vec(0i64..1000, 1..100),
            q1 in 0.0f64..=1.0,
            q2 in 0.0f64..=1.0,
        ) {
            let mut sorted = pool;
            sorted.sort();
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            prop_assert!(nearest_rank(&sorted, lo) <= nearest_rank(&sorted, hi));
        }
    }
}
