//! Timestamped dialogue logs grouped into per-user chronological histories.

mod synthetic;
mod vocab;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic_corpus, topic_of_token, SyntheticCorpus, SyntheticSpec};
pub use vocab::{segment, Vocabulary, BOS, EOS, MASK, PAD, SPECIAL_TOKENS, UNK};

/// One response event: `user_id` answered `query_text` (written by
/// `addressee_id`) with `response_text` at `timestamp`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTriple {
    pub user_id: String,
    pub query_text: String,
    pub response_text: String,
    pub timestamp: i64,
    pub addressee_id: String,
}

impl DialogueTriple {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.timestamp < 0 {
            return Err(format!("negative timestamp {}", self.timestamp));
        }
        if self.response_text.trim().is_empty() {
            return Err("empty response_text".into());
        }
        if self.user_id == self.addressee_id {
            return Err(format!("user {} replies to itself", self.user_id));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    /// Non-decreasing by timestamp.
    pub triples: Vec<DialogueTriple>,
}

impl UserHistory {
    pub fn new(user_id: impl Into<String>, mut triples: Vec<DialogueTriple>) -> Self {
        triples.sort_by_key(|t| t.timestamp);
        Self {
            user_id: user_id.into(),
            triples,
        }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn responses(&self) -> impl Iterator<Item = &str> {
        self.triples.iter().map(|t| t.response_text.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    /// Ordered by user id; every history is non-empty.
    pub users: BTreeMap<String, UserHistory>,
    pub provenance: String,
}

impl Corpus {
    /// Groups triples per user; each history is sorted stably by timestamp.
    pub fn from_triples(triples: impl IntoIterator<Item = DialogueTriple>, provenance: impl Into<String>) -> Self {
        let mut grouped: BTreeMap<String, Vec<DialogueTriple>> = BTreeMap::new();
        for t in triples {
            grouped.entry(t.user_id.clone()).or_default().push(t);
        }
        Self {
            users: grouped
                .into_iter()
                .map(|(u, ts)| (u.clone(), UserHistory::new(u, ts)))
                .collect(),
            provenance: provenance.into(),
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_triples(&self) -> usize {
        self.users.values().map(UserHistory::len).sum()
    }

    pub fn triples(&self) -> impl Iterator<Item = &DialogueTriple> {
        self.users.values().flat_map(|h| h.triples.iter())
    }

    pub fn user(&self, id: &str) -> Option<&UserHistory> {
        self.users.get(id)
    }

    /// Writes the corpus as JSON Lines, users in id order.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for t in self.triples() {
            serde_json::to_writer(&mut out, t).expect("triple serializes");
            out.push(b'\n');
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub valid: usize,
    pub skipped: usize,
}

fn parse_record(line: &str) -> std::result::Result<DialogueTriple, String> {
    let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let text = |k: &str| {
        v.get(k)
            .and_then(|x| x.as_str())
            .map(str::to_string)
            .ok_or_else(|| format!("missing or non-string field `{k}`"))
    };
    let timestamp = v
        .get("timestamp")
        .and_then(|x| x.as_i64())
        .ok_or_else(|| "missing or non-integer field `timestamp`".to_string())?;
    let t = DialogueTriple {
        user_id: text("user_id")?,
        query_text: text("query_text")?,
        response_text: text("response_text")?,
        timestamp,
        addressee_id: text("addressee_id")?,
    };
    t.validate()?;
    Ok(t)
}

/// Reads a JSON Lines corpus. Malformed records are skipped with a warning;
/// a file with no valid record is an error.
pub fn ingest_corpus(path: &Path) -> Result<(Corpus, IngestReport)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = IngestReport::default();
    let mut triples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line) {
            Ok(t) => {
                triples.push(t);
                report.valid += 1;
            }
            Err(msg) => {
                report.skipped += 1;
                log::warn!("{}:{}: skipped record: {msg}", path.display(), lineno + 1);
            }
        }
    }
    if triples.is_empty() {
        return Err(Error::Data(format!("{}: no valid records", path.display())));
    }
    Ok((Corpus::from_triples(triples, path.display().to_string()), report))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, valid: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistorySplit {
    pub train: UserHistory,
    pub valid: UserHistory,
    pub test: UserHistory,
}

impl HistorySplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }
}

/// Minimum history length for a user to take part in supervised splits.
pub const MIN_SPLIT_LEN: usize = 3;

fn floor_share(n: usize, ratio: f64) -> usize {
    // The epsilon absorbs products like 0.1 * 30 = 3.0000000000000004 and
    // 0.7 * 10 = 6.999999999999999.
    ((n as f64) * ratio + 1e-9).floor() as usize
}

/// Earliest `⌊train·n⌋` triples train, next `⌊valid·n⌋` validate, the rest
/// test. Histories shorter than [`MIN_SPLIT_LEN`] are excluded (`None`).
pub fn chronological_split(history: &UserHistory, ratios: SplitRatios) -> Option<HistorySplit> {
    let n = history.len();
    if n < MIN_SPLIT_LEN {
        log::info!(
            "user {} has {n} responses; excluded from supervised splits",
            history.user_id
        );
        return None;
    }
    let n_train = floor_share(n, ratios.train).min(n);
    let n_valid = floor_share(n, ratios.valid).min(n - n_train);
    let part = |r: std::ops::Range<usize>| UserHistory {
        user_id: history.user_id.clone(),
        triples: history.triples[r].to_vec(),
    };
    Some(HistorySplit {
        train: part(0..n_train),
        valid: part(n_train..n_train + n_valid),
        test: part(n_train + n_valid..n),
    })
}
