//! Automatic response metrics: n-gram overlap, embedding similarity and
//! persona overlap with the user's history.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and candidate n-gram total.
fn clipped<S: AsRef<str>>(cand: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let c = ngrams(cand, n);
    let r = ngrams(reference, n);
    let matches = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, cand.len().saturating_sub(n - 1))
}

/// Sentence BLEU-1 or BLEU-2 (geometric mean of unigram and bigram
/// precision). A zero bigram match count is smoothed to `1 / (total + 1)`.
pub fn bleu_n<S: AsRef<str>>(cand: &[S], reference: &[S], n: usize) -> f64 {
    assert!(n == 1 || n == 2, "bleu_n supports n in {{1, 2}}");
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let bp = (1.0 - reference.len() as f64 / cand.len() as f64).min(0.0).exp();
    let (m1, t1) = clipped(cand, reference, 1);
    let p1 = m1 as f64 / t1 as f64;
    if n == 1 {
        return bp * p1;
    }
    let (m2, t2) = clipped(cand, reference, 2);
    let p2 = if m2 == 0 {
        1.0 / (t2 + 1) as f64
    } else {
        m2 as f64 / t2 as f64
    };
    bp * (p1 * p2).sqrt()
}

fn lcs<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1.
pub fn rouge_l<S: AsRef<str>>(cand: &[S], reference: &[S]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs(cand, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / cand.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Word vectors for the embedding metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WordVectors {
    vectors: HashMap<String, Vec<f64>>,
    dim: usize,
}

impl WordVectors {
    pub fn new(dim: usize) -> Self {
        Self {
            vectors: HashMap::new(),
            dim,
        }
    }

    pub fn insert(&mut self, word: &str, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Data(format!(
                "vector for {word:?} has {} dims, expected {}",
                v.len(),
                self.dim
            )));
        }
        self.vectors.insert(word.to_string(), v);
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Parses `token v1 … vd` lines. Blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: Option<Self> = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let v = parts
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Data(format!("word vectors line {}: {e}", i + 1)))?;
            if v.is_empty() {
                return Err(Error::Data(format!("word vectors line {}: no components", i + 1)));
            }
            let t = table.get_or_insert_with(|| Self::new(v.len()));
            t.insert(word, v)
                .map_err(|e| Error::Data(format!("word vectors line {}: {e}", i + 1)))?;
        }
        table.ok_or_else(|| Error::Data("word vector file is empty".into()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingScores {
    pub average: f64,
    pub extreme: f64,
    pub greedy: f64,
}

/// Embedding similarity in its three variants. `None` when every word
/// on either side is out of vocabulary.
pub fn embedding_similarity<S: AsRef<str>>(cand: &[S], reference: &[S], wv: &WordVectors) -> Option<EmbeddingScores> {
    let lookup = |s: &[S]| -> Vec<&[f64]> { s.iter().filter_map(|w| wv.get(w.as_ref())).collect() };
    let (c, r) = (lookup(cand), lookup(reference));
    if c.is_empty() || r.is_empty() {
        return None;
    }
    let mean = |vs: &[&[f64]]| -> Vec<f64> {
        (0..wv.dim())
            .map(|k| vs.iter().map(|v| v[k]).sum::<f64>() / vs.len() as f64)
            .collect()
    };
    let extreme = |vs: &[&[f64]]| -> Vec<f64> {
        (0..wv.dim())
            .map(|k| {
                vs.iter()
                    .map(|v| v[k])
                    .fold(0.0, |m: f64, x| if x.abs() > m.abs() { x } else { m })
            })
            .collect()
    };
    let one_way = |a: &[&[f64]], b: &[&[f64]]| -> f64 {
        a.iter()
            .map(|x| b.iter().map(|y| cos(x, y)).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / a.len() as f64
    };
    Some(EmbeddingScores {
        average: cos(&mean(&c), &mean(&r)),
        extreme: cos(&extreme(&c), &extreme(&r)),
        greedy: (one_way(&c, &r) + one_way(&r, &c)) / 2.0,
    })
}

/// Unigram F1 between the candidate's distinct tokens and the pooled
/// distinct tokens of the history, stopwords removed from both.
pub fn persona_f1<S: AsRef<str>>(cand: &[S], history: &[Vec<S>], stopwords: &HashSet<String>) -> f64 {
    let keep = |w: &&str| !stopwords.contains(*w);
    let c: HashSet<&str> = cand.iter().map(AsRef::as_ref).filter(keep).collect();
    let h: HashSet<&str> = history.iter().flatten().map(AsRef::as_ref).filter(keep).collect();
    let overlap = c.intersection(&h).count();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / c.len() as f64;
    let r = overlap as f64 / h.len() as f64;
    2.0 * p * r / (p + r)
}

/// Smoothed inverse document frequencies, `ln((1 + D) / (1 + df)) + 1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    pub num_docs: usize,
    pub doc_freq: BTreeMap<String, usize>,
}

impl IdfTable {
    pub fn build<S: AsRef<str>>(docs: &[Vec<S>]) -> Self {
        let mut doc_freq = BTreeMap::new();
        for d in docs {
            let distinct: HashSet<&str> = d.iter().map(AsRef::as_ref).collect();
            for w in distinct {
                *doc_freq.entry(w.to_string()).or_insert(0) += 1;
            }
        }
        Self {
            num_docs: docs.len(),
            doc_freq,
        }
    }

    /// Unseen words take `df = 0`.
    pub fn idf(&self, word: &str) -> f64 {
        let df = self.doc_freq.get(word).copied().unwrap_or(0);
        ((1 + self.num_docs) as f64 / (1 + df) as f64).ln() + 1.0
    }
}

/// Best IDF-weighted share of the candidate's distinct tokens found in any
/// single historical response.
pub fn persona_coverage<S: AsRef<str>>(cand: &[S], history: &[Vec<S>], idf: &IdfTable) -> f64 {
    // Sorted so that sums do not depend on hash order.
    let c: BTreeSet<&str> = cand.iter().map(AsRef::as_ref).collect();
    let total: f64 = c.iter().map(|w| idf.idf(w)).sum();
    if total == 0.0 {
        return 0.0;
    }
    history
        .iter()
        .map(|h| {
            let h: HashSet<&str> = h.iter().map(AsRef::as_ref).collect();
            c.iter().filter(|w| h.contains(*w)).map(|w| idf.idf(w)).sum::<f64>() / total
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Removed before Persona-F1.
    pub stopwords: Vec<String>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        let words = [
            "a", "an", "the", "and", "or", "but", "is", "are", "was", "be", "to", "of", "in", "on", "at", "for", "it",
            "that", "this", "with", "as", "so",
        ];
        Self {
            stopwords: words.iter().map(|w| w.to_string()).collect(),
        }
    }
}

/// One example to score.
#[derive(Clone, Debug)]
pub struct EvalExample {
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
    /// The user's training-split responses.
    pub history: Vec<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub bleu1: f64,
    pub bleu2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub embedding: Option<EmbeddingScores>,
    pub persona_f1: f64,
    pub persona_cover: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub examples: usize,
    /// Examples left out of the embedding means (all words unknown).
    pub embedding_excluded: usize,
}

/// Corpus means of the eight metrics. Embedding means are `None` when no
/// example had in-vocabulary words on both sides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub emb_avg: Option<f64>,
    pub emb_ext: Option<f64>,
    pub emb_gre: Option<f64>,
    pub persona_f1: f64,
    pub persona_cover: f64,
    pub counts: MetricCounts,
}

pub fn score_example(ex: &EvalExample, wv: &WordVectors, idf: &IdfTable, stopwords: &HashSet<String>) -> ExampleScores {
    ExampleScores {
        bleu1: bleu_n(&ex.candidate, &ex.reference, 1),
        bleu2: bleu_n(&ex.candidate, &ex.reference, 2),
        rouge_l: rouge_l(&ex.candidate, &ex.reference),
        embedding: embedding_similarity(&ex.candidate, &ex.reference, wv),
        persona_f1: if ex.history.is_empty() {
            0.0
        } else {
            persona_f1(&ex.candidate, &ex.history, stopwords)
        },
        persona_cover: persona_coverage(&ex.candidate, &ex.history, idf),
    }
}

/// Means over per-example scores.
pub fn aggregate(scores: &[ExampleScores]) -> MetricReport {
    let n = scores.len();
    let mean = |f: &dyn Fn(&ExampleScores) -> f64| {
        if n == 0 {
            0.0
        } else {
            scores.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let emb: Vec<EmbeddingScores> = scores.iter().filter_map(|s| s.embedding).collect();
    let emb_mean =
        |f: fn(&EmbeddingScores) -> f64| (!emb.is_empty()).then(|| emb.iter().map(f).sum::<f64>() / emb.len() as f64);
    MetricReport {
        bleu1: mean(&|s| s.bleu1),
        bleu2: mean(&|s| s.bleu2),
        rouge_l: mean(&|s| s.rouge_l),
        emb_avg: emb_mean(|e| e.average),
        emb_ext: emb_mean(|e| e.extreme),
        emb_gre: emb_mean(|e| e.greedy),
        persona_f1: mean(&|s| s.persona_f1),
        persona_cover: mean(&|s| s.persona_cover),
        counts: MetricCounts {
            examples: n,
            embedding_excluded: n - emb.len(),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
}

/// Paired two-sided t-test on per-example scores.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Usage(format!(
            "paired t-test needs two equal-length samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        };
        return Ok(TTest { t, df, p_value: p });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
    let p_value = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest { t, df, p_value })
}
