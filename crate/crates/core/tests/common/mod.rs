//! Brute-force oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use chatprof_autograd::TransformerConfig;
use chatprof_core::corpus::{Corpus, UserHistory};
use chatprof_core::generator::{rank, Hypothesis, SearchTokens, StepModel};
use chatprof_core::metrics::{IdfTable, WordVectors};
use chatprof_core::pipeline::RunConfig;
use chatprof_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- mining

/// Every `(i, j)`, `i < j`, same addressee, `|dt| <= t_tilde`; no early exit.
pub fn brute_response_pairs(h: &UserHistory, t_tilde: i64) -> Vec<(usize, usize)> {
    let t = &h.triples;
    let mut out = Vec::new();
    for i in 0..t.len() {
        for j in 0..t.len() {
            if i < j && t[i].addressee_id == t[j].addressee_id && (t[j].timestamp - t[i].timestamp).abs() <= t_tilde {
                out.push((i, j));
            }
        }
    }
    out
}

/// Every unordered user pair with at least `s_hat` common addressees,
/// counted by set intersection.
pub fn brute_user_pairs(corpus: &Corpus, s_hat: usize) -> Vec<(String, String, usize)> {
    let sets: Vec<(&String, BTreeSet<&str>)> = corpus
        .users
        .iter()
        .map(|(id, h)| (id, h.triples.iter().map(|t| t.addressee_id.as_str()).collect()))
        .collect();
    let mut out = Vec::new();
    for a in 0..sets.len() {
        for b in 0..sets.len() {
            if a >= b {
                continue;
            }
            let shared = sets[a].1.iter().filter(|x| sets[b].1.contains(*x)).count();
            if shared >= s_hat {
                out.push((sets[a].0.clone(), sets[b].0.clone(), shared));
            }
        }
    }
    out
}

/// Value at the smallest 1-based rank `r` with `r >= q * m`.
pub fn quantile_oracle(values: &[i64], q: f64) -> i64 {
    let mut sorted = values.to_vec();
    sorted.sort();
    let m = sorted.len();
    let r = (1..=m).find(|&r| r as f64 >= q * m as f64 - 1e-9).unwrap_or(m);
    sorted[r - 1]
}

// ---------------------------------------------------------------- metrics

fn ngram_list(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

/// Modified precision by explicit matching: each reference n-gram can be
/// consumed by at most one candidate n-gram.
fn matched(cand: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let c = ngram_list(cand, n);
    let mut pool = ngram_list(reference, n);
    let mut hits = 0;
    for g in &c {
        if let Some(k) = pool.iter().position(|r| r == g) {
            pool.remove(k);
            hits += 1;
        }
    }
    (hits, c.len())
}

pub fn oracle_bleu(cand: &[String], reference: &[String], n: usize) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let bp = if cand.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / cand.len() as f64).exp()
    };
    let (h1, t1) = matched(cand, reference, 1);
    let p1 = h1 as f64 / t1 as f64;
    if n == 1 {
        return bp * p1;
    }
    let (h2, t2) = matched(cand, reference, 2);
    let p2 = if h2 == 0 {
        1.0 / (t2 as f64 + 1.0)
    } else {
        h2 as f64 / t2 as f64
    };
    bp * (p1 * p2).sqrt()
}

fn is_subsequence(sub: &[&String], seq: &[String]) -> bool {
    let mut it = seq.iter();
    sub.iter().all(|s| it.any(|x| x == *s))
}

/// Longest common subsequence by enumerating candidate subsequences.
pub fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 16, "enumeration oracle limited to short candidates");
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn oracle_rouge_l(cand: &[String], reference: &[String]) -> f64 {
    let l = oracle_lcs(cand, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / cand.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn distinct(words: impl IntoIterator<Item = String>, stop: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for w in words {
        if !stop.contains(&w) && !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

pub fn oracle_persona_f1(cand: &[String], history: &[Vec<String>], stop: &[String]) -> f64 {
    let c = distinct(cand.iter().cloned(), stop);
    let h = distinct(history.iter().flatten().cloned(), stop);
    let overlap = c.iter().filter(|w| h.contains(w)).count() as f64;
    if overlap == 0.0 {
        return 0.0;
    }
    let p = overlap / c.len() as f64;
    let r = overlap / h.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn oracle_idf(docs: &[Vec<String>], word: &str) -> f64 {
    let df = docs.iter().filter(|d| d.iter().any(|w| w == word)).count();
    ((docs.len() as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
}

pub fn oracle_coverage(cand: &[String], history: &[Vec<String>], docs: &[Vec<String>]) -> f64 {
    let c = distinct(cand.iter().cloned(), &[]);
    let mut c_sorted = c.clone();
    c_sorted.sort();
    let total: f64 = c_sorted.iter().map(|w| oracle_idf(docs, w)).sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut best = 0.0f64;
    for h in history {
        let s: f64 = c_sorted
            .iter()
            .filter(|w| h.contains(w))
            .map(|w| oracle_idf(docs, w))
            .sum();
        best = best.max(s / total);
    }
    best
}

fn oracle_cos(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for k in 0..u.len() {
        dot += u[k] * v[k];
        nu += u[k] * u[k];
        nv += v[k] * v[k];
    }
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu.sqrt() * nv.sqrt())
    }
}

/// (average, extreme, greedy) over in-vocabulary words, `None` when either
/// side has none.
pub fn oracle_embedding(cand: &[String], reference: &[String], table: &BTreeMap<String, Vec<f64>>) -> Option<[f64; 3]> {
    let c: Vec<&Vec<f64>> = cand.iter().filter_map(|w| table.get(w)).collect();
    let r: Vec<&Vec<f64>> = reference.iter().filter_map(|w| table.get(w)).collect();
    if c.is_empty() || r.is_empty() {
        return None;
    }
    let dim = c[0].len();
    let mean = |vs: &[&Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; dim];
        for v in vs {
            for k in 0..dim {
                m[k] += v[k];
            }
        }
        m.iter().map(|x| x / vs.len() as f64).collect()
    };
    let extreme = |vs: &[&Vec<f64>]| -> Vec<f64> {
        (0..dim)
            .map(|k| {
                let hi = vs.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
                let lo = vs.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
                if hi.abs() >= lo.abs() {
                    hi
                } else {
                    lo
                }
            })
            .collect()
    };
    let directed = |a: &[&Vec<f64>], b: &[&Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for x in a {
            let mut best = f64::NEG_INFINITY;
            for y in b {
                best = best.max(oracle_cos(x, y));
            }
            s += best;
        }
        s / a.len() as f64
    };
    Some([
        oracle_cos(&mean(&c), &mean(&r)),
        oracle_cos(&extreme(&c), &extreme(&r)),
        0.5 * (directed(&c, &r) + directed(&r, &c)),
    ])
}

/// One randomized metric fixture: candidate, reference, history, a word
/// vector table covering part of the vocabulary, and IDF documents.
pub struct MetricFixture {
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
    pub history: Vec<Vec<String>>,
    pub vectors: BTreeMap<String, Vec<f64>>,
    pub docs: Vec<Vec<String>>,
    pub stopwords: Vec<String>,
}

impl MetricFixture {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab: Vec<String> = (0..8)
            .map(|i| format!("w{i}"))
            .chain(["the".into(), "a".into()])
            .collect();
        let sentence = |rng: &mut ChaCha8Rng, min: usize| -> Vec<String> {
            let n = rng.gen_range(min..=9);
            (0..n).map(|_| vocab[rng.gen_range(0..vocab.len())].clone()).collect()
        };
        let candidate = sentence(&mut rng, 1);
        let reference = sentence(&mut rng, 1);
        let history: Vec<Vec<String>> = (0..rng.gen_range(1..5)).map(|_| sentence(&mut rng, 1)).collect();
        let docs: Vec<Vec<String>> = (0..rng.gen_range(1..8)).map(|_| sentence(&mut rng, 0)).collect();
        let mut vectors = BTreeMap::new();
        for w in &vocab {
            if rng.gen_bool(0.7) {
                vectors.insert(w.clone(), (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
            }
        }
        Self {
            candidate,
            reference,
            history,
            vectors,
            docs,
            stopwords: vec!["the".into(), "a".into()],
        }
    }

    pub fn word_vectors(&self) -> WordVectors {
        let mut wv = WordVectors::new(4);
        for (w, v) in &self.vectors {
            wv.insert(w, v.clone()).unwrap();
        }
        wv
    }

    pub fn idf(&self) -> IdfTable {
        IdfTable::build(&self.docs)
    }
}

// ---------------------------------------------------------------- search

/// Next-token log-probabilities drawn from a seed per prefix.
pub struct TableModel {
    pub vocab: usize,
    pub seed: u64,
    table: HashMap<Vec<u32>, Vec<f64>>,
}

impl TableModel {
    pub fn new(vocab: usize, seed: u64) -> Self {
        Self {
            vocab,
            seed,
            table: HashMap::new(),
        }
    }

    pub fn dist(&mut self, prefix: &[u32]) -> Vec<f64> {
        let (vocab, seed) = (self.vocab, self.seed);
        self.table
            .entry(prefix.to_vec())
            .or_insert_with(|| {
                let mut h = seed ^ 0x5bd1_e995;
                for &t in prefix {
                    h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(t as u64 + 7);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(h);
                let w: Vec<f64> = (0..vocab).map(|_| rng.gen::<f64>() + 0.05).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| (x / s).ln()).collect()
            })
            .clone()
    }
}

impl StepModel for TableModel {
    fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.dist(p)).collect())
    }
}

/// Explicit next-token distributions keyed by generated tokens (BOS
/// excluded); prefixes not listed get `fallback`.
pub struct FixedModel {
    pub table: HashMap<Vec<u32>, Vec<f64>>,
    pub fallback: Vec<f64>,
}

impl StepModel for FixedModel {
    fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let d = self.table.get(&p[1..]).unwrap_or(&self.fallback);
                d.iter().map(|x| x.ln()).collect()
            })
            .collect())
    }
}

/// Enumerates every sequence up to `max_len` tokens. The answer is the
/// best finished sequence under [`rank`], else the best unfinished one of
/// full length.
pub fn exhaustive(model: &mut dyn StepModel, tokens: &SearchTokens, max_len: usize) -> Hypothesis {
    let mut best_fin: Option<Hypothesis> = None;
    let mut frontier = vec![Hypothesis {
        tokens: vec![],
        score: 0.0,
        finished: false,
    }];
    let better = |c: &Hypothesis, b: &Option<Hypothesis>| b.as_ref().is_none_or(|b| rank(c, b, 0.0).is_lt());
    for _ in 0..max_len {
        let mut next = Vec::new();
        for h in frontier {
            let prefix: Vec<u32> = std::iter::once(tokens.bos).chain(h.tokens.iter().copied()).collect();
            let lp = model.log_probs(&[prefix]).unwrap().remove(0);
            for (t, l) in lp.into_iter().enumerate() {
                let t = t as u32;
                if tokens.banned.contains(&t) {
                    continue;
                }
                let mut seq = h.tokens.clone();
                seq.push(t);
                let c = Hypothesis {
                    tokens: seq,
                    score: h.score + l,
                    finished: t == tokens.eos,
                };
                if c.finished {
                    if better(&c, &best_fin) {
                        best_fin = Some(c);
                    }
                } else {
                    next.push(c);
                }
            }
        }
        frontier = next;
    }
    if let Some(f) = best_fin {
        return f;
    }
    let mut best_open = None;
    for c in frontier {
        if better(&c, &best_open) {
            best_open = Some(c);
        }
    }
    best_open.expect("non-empty vocabulary")
}

// ---------------------------------------------------------------- pipeline

/// A small model on a small synthetic corpus; seconds per stage.
pub fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.paths.output_dir = out.to_path_buf();
    cfg.synthetic.num_users = 8;
    cfg.synthetic.responses_per_user = 16;
    cfg.synthetic.num_topics = 2;
    let t = TransformerConfig {
        num_layers: 1,
        hidden_size: 16,
        num_heads: 2,
        ff_multiplier: 2,
        max_positions: 16,
        dropout: 0.0,
    };
    cfg.encoders.utterance = t.clone();
    cfg.encoders.history = t.clone();
    cfg.generator.encoder = t.clone();
    cfg.generator.decoder = t;
    cfg.mining.history_len = 8;
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 8;
    cfg.pretrain.max_steps_per_epoch = Some(6);
    cfg.finetune.epochs = 2;
    cfg.finetune.batch_size = 8;
    cfg.generation.beam_width = 3;
    cfg.generation.max_decode_len = 8;
    cfg.evaluate.max_examples = Some(6);
    cfg.analysis.max_utterances = 60;
    cfg
}

/// Every regular file under `dir`, keyed by relative path.
pub fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Parameter files of a checkpoint whose names satisfy `select`.
pub fn checkpoint_params(dir: &Path, select: impl Fn(&str) -> bool) -> BTreeMap<String, Vec<u8>> {
    read_tree(dir)
        .into_iter()
        .filter(|(name, _)| name.ends_with(".f32") && select(name))
        .collect()
}
