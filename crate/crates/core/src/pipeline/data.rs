use std::collections::BTreeMap;

use crate::corpus::{chronological_split, generate_synthetic_corpus, ingest_corpus, Corpus, HistorySplit, UserHistory};
use crate::error::{Error, Result};

use super::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Valid,
    Test,
}

/// One fine-tuning or evaluation example. `history` indexes the user's
/// full chronological history in [`Dataset::corpus`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenExample {
    pub user_id: String,
    pub query: String,
    pub response: String,
    pub history: Vec<usize>,
}

/// The corpus with its per-user splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub corpus: Corpus,
    /// Planted topics per user, for synthetic corpora.
    pub topics: Option<BTreeMap<String, Vec<usize>>>,
    pub splits: BTreeMap<String, HistorySplit>,
    /// What pre-training and vocabulary building may see: the training
    /// split of every splittable user plus the whole history of users too
    /// short to split.
    pub mining_corpus: Corpus,
}

impl Dataset {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        match &cfg.paths.corpus {
            Some(path) => {
                let (corpus, report) = ingest_corpus(path)?;
                log::info!("ingested {} records ({} skipped)", report.valid, report.skipped);
                Ok(Self::from_corpus(corpus, None, cfg))
            }
            None => {
                let synth = generate_synthetic_corpus(&cfg.synthetic)?;
                Ok(Self::from_corpus(synth.corpus, Some(synth.user_topics), cfg))
            }
        }
    }

    pub fn from_corpus(corpus: Corpus, topics: Option<BTreeMap<String, Vec<usize>>>, cfg: &RunConfig) -> Self {
        let mut splits = BTreeMap::new();
        let mut mining = Vec::new();
        for (id, h) in &corpus.users {
            match chronological_split(h, cfg.split) {
                Some(s) => {
                    mining.extend(s.train.triples.iter().cloned());
                    splits.insert(id.clone(), s);
                }
                None => mining.extend(h.triples.iter().cloned()),
            }
        }
        let mining_corpus = Corpus::from_triples(mining, format!("{} (training portion)", corpus.provenance));
        Self {
            corpus,
            topics,
            splits,
            mining_corpus,
        }
    }

    pub fn primary_topic(&self, user: &str) -> Option<usize> {
        self.topics.as_ref()?.get(user)?.first().copied()
    }

    /// Examples of one split. Each carries up to `history_len` responses
    /// strictly preceding it in time; examples with no earlier response are
    /// dropped.
    pub fn examples(&self, part: Part, history_len: usize) -> Vec<GenExample> {
        let mut out = Vec::new();
        for (id, split) in &self.splits {
            let full = &self.corpus.users[id];
            let (n_train, n_valid, _) = split.sizes();
            let range = match part {
                Part::Train => 0..n_train,
                Part::Valid => n_train..n_train + n_valid,
                Part::Test => n_train + n_valid..full.len(),
            };
            for i in range {
                let t = &full.triples[i];
                let before = full.triples[..i].partition_point(|p| p.timestamp < t.timestamp);
                if before == 0 {
                    continue;
                }
                out.push(GenExample {
                    user_id: id.clone(),
                    query: t.query_text.clone(),
                    response: t.response_text.clone(),
                    history: (before.saturating_sub(history_len)..before).collect(),
                });
            }
        }
        out
    }

    pub fn user(&self, id: &str) -> Result<&UserHistory> {
        self.corpus
            .user(id)
            .ok_or_else(|| Error::Data(format!("unknown user {id}")))
    }

    /// Training-split responses of a user, the persona reference.
    pub fn train_responses(&self, id: &str) -> Vec<&str> {
        self.splits
            .get(id)
            .map(|s| s.train.responses().collect())
            .unwrap_or_default()
    }
}
