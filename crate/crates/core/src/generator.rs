//! Profile-conditioned encoder-decoder and beam search.
//!
//! The context encoder reads `[U; p]`: the profile vector as one pseudo-token
//! in front of the embedded query. The decoder attends causally over its
//! prefix and across to that memory.

use std::cmp::Ordering;
use std::ops::Range;
use std::rc::Rc;

use chatprof_autograd::transformer::packed_positions;
use chatprof_autograd::{
    AttentionLayout, Decoder, Encoder, Graph, Init, Linear, ParamId, ParameterStore, Scalar, Tensor, TransformerConfig,
    Var,
};
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};

pub const GENERATOR_PREFIX: &str = "gen.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub encoder: TransformerConfig,
    pub decoder: TransformerConfig,
    /// Ablation: add the profile to every query embedding instead of
    /// prepending it as a pseudo-token.
    pub profile_add: bool,
    /// Reuse the token embedding as the output projection.
    pub tie_embeddings: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let t = TransformerConfig {
            max_positions: 32,
            ..Default::default()
        };
        Self {
            encoder: t.clone(),
            decoder: t,
            profile_add: false,
            tie_embeddings: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub beam_width: usize,
    pub max_decode_len: usize,
    /// Length-normalization exponent; 0 disables it.
    pub alpha: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            beam_width: 12,
            max_decode_len: 20,
            alpha: 0.0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_decode_len == 0 {
            return Err(Error::Usage("beam_width and max_decode_len must be at least 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Usage(format!("alpha {} must be non-negative", self.alpha)));
        }
        Ok(())
    }
}

/// Encoded contexts of a batch: memory rows plus each example's range.
#[derive(Clone, Debug)]
pub struct Context {
    pub memory: Var,
    pub ranges: Vec<Range<usize>>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    embedding: ParamId,
    encoder: Encoder,
    decoder: Decoder,
    output: Option<Linear>,
}

impl Generator {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, cfg: &GeneratorConfig, vocab_size: usize) -> Result<Self> {
        let d = cfg.encoder.hidden_size;
        if cfg.decoder.hidden_size != d {
            return Err(Error::Usage(format!(
                "generator encoder hidden_size {d} must equal decoder hidden_size {}",
                cfg.decoder.hidden_size
            )));
        }
        let embedding = store.register("gen.token_embedding", vocab_size, d, Init::FanIn(d))?;
        let encoder = Encoder::new(store, "gen.encoder", &cfg.encoder)?;
        let decoder = Decoder::new(store, "gen.decoder", &cfg.decoder)?;
        let output = if cfg.tie_embeddings {
            None
        } else {
            Some(Linear::new(store, "gen.output", d, vocab_size, true)?)
        };
        Ok(Self {
            cfg: cfg.clone(),
            embedding,
            encoder,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn hidden_size(&self) -> usize {
        self.cfg.encoder.hidden_size
    }

    /// Longest response the decoder can be trained on (EOS included).
    pub fn max_target_len(&self) -> usize {
        self.cfg.decoder.max_positions
    }

    fn embed<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &[u32]) -> Var {
        let table = g.param(self.embedding);
        let x = g.gather_rows(table, ids.iter().map(|&t| t as usize).collect());
        g.scale(x, (self.hidden_size() as f64).sqrt())
    }

    /// Memory for each (profile row, query) pair. `profiles` has one row per
    /// query.
    pub fn encode_context<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        profiles: Var,
        queries: &[Vec<u32>],
    ) -> Result<Context> {
        let (n_prof, d) = g.shape(profiles);
        if n_prof != queries.len() {
            return Err(Error::Usage(format!("{n_prof} profiles for {} queries", queries.len())));
        }
        if d != self.hidden_size() {
            return Err(Error::Usage(format!(
                "profile width {d} != generator width {}",
                self.hidden_size()
            )));
        }
        let extra = usize::from(!self.cfg.profile_add);
        let keep = self.cfg.encoder.max_positions - extra;
        if keep == 0 {
            return Err(Error::Usage(
                "encoder max_positions leaves no room for the query".into(),
            ));
        }
        let mut ids = Vec::new();
        let mut lengths = Vec::with_capacity(queries.len());
        for q in queries {
            if q.is_empty() {
                return Err(Error::Data("empty query".into()));
            }
            let q = &q[..q.len().min(keep)];
            ids.extend_from_slice(q);
            lengths.push(q.len());
        }
        let tokens = self.embed(g, &ids);
        let x = if self.cfg.profile_add {
            let owner = lengths
                .iter()
                .enumerate()
                .flat_map(|(i, &l)| std::iter::repeat_n(i, l))
                .collect();
            let p = g.gather_rows(profiles, owner);
            g.add(tokens, p)
        } else {
            // Rows of concat([profiles, tokens]) in [U_i; p_i] order.
            let mut order = Vec::with_capacity(ids.len() + n_prof);
            let mut next = n_prof;
            for (i, &l) in lengths.iter().enumerate() {
                order.push(i);
                order.extend(next..next + l);
                next += l;
            }
            let all = g.concat_rows(&[profiles, tokens]);
            g.gather_rows(all, order)
        };
        let seg: Vec<usize> = lengths.iter().map(|l| l + extra).collect();
        let pos = g.constant(packed_positions(&seg, 0, d));
        let x = g.add(x, pos);
        let layout = Rc::new(AttentionLayout::packed_self(&seg, false));
        let memory = self.encoder.forward(g, x, &layout)?;
        let mut ranges = Vec::with_capacity(seg.len());
        let mut start = 0;
        for l in seg {
            ranges.push(start..start + l);
            start += l;
        }
        Ok(Context { memory, ranges })
    }

    /// Logits for every position of every prefix, prefixes packed in order.
    /// `owners[i]` names the context range prefix `i` attends to.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        memory: Var,
        ranges: &[Range<usize>],
        owners: &[usize],
        prefixes: &[Vec<u32>],
    ) -> Result<Var> {
        if prefixes.iter().any(|p| p.first() != Some(&BOS)) {
            return Err(Error::Usage("decoder prefix must begin with BOS".into()));
        }
        let d = self.hidden_size();
        let lengths: Vec<usize> = prefixes.iter().map(Vec::len).collect();
        let ids: Vec<u32> = prefixes.concat();
        let x = self.embed(g, &ids);
        let pos = g.constant(packed_positions(&lengths, 0, d));
        let x = g.add(x, pos);
        let self_layout = Rc::new(AttentionLayout::packed_self(&lengths, true));
        let keys: Vec<Range<usize>> = owners.iter().map(|&o| ranges[o].clone()).collect();
        let (mem_rows, _) = g.shape(memory);
        let cross = Rc::new(AttentionLayout::packed_cross(&lengths, &keys, mem_rows));
        let h = self.decoder.forward(g, x, &self_layout, memory, &cross)?;
        Ok(match &self.output {
            Some(out) => out.forward(g, h),
            None => {
                let e = g.param(self.embedding);
                g.matmul_t(h, e)
            }
        })
    }

    /// Teacher-forced generation loss: mean token cross-entropy over
    /// `response + EOS`, fed `BOS + response`. Long responses keep their head.
    pub fn teacher_forced_loss<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        profiles: Var,
        queries: &[Vec<u32>],
        responses: &[Vec<u32>],
    ) -> Result<Var> {
        let ctx = self.encode_context(g, profiles, queries)?;
        let keep = self.cfg.decoder.max_positions - 1;
        let mut prefixes = Vec::with_capacity(responses.len());
        let mut targets = Vec::new();
        for r in responses {
            let r = &r[..r.len().min(keep)];
            let mut p = vec![BOS];
            p.extend_from_slice(r);
            prefixes.push(p);
            targets.extend(r.iter().map(|&t| Some(t as usize)));
            targets.push(Some(EOS as usize));
        }
        let owners: Vec<usize> = (0..responses.len()).collect();
        let logits = self.decode(g, ctx.memory, &ctx.ranges, &owners, &prefixes)?;
        Ok(g.cross_entropy(logits, targets, None))
    }

    /// One example's memory as a plain tensor.
    pub fn memory<T: Scalar>(&self, store: &ParameterStore<T>, profile: &[T], query: &[u32]) -> Result<Tensor<T>> {
        let mut g = Graph::new(store);
        let p = g.constant(Tensor::row_vector(profile.to_vec()));
        let ctx = self.encode_context(&mut g, p, &[query.to_vec()])?;
        Ok(g.value(ctx.memory).clone())
    }

    /// Next-token distribution after `prefix`.
    pub fn decode_step<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        memory: &Tensor<T>,
        prefix: &[u32],
    ) -> Result<Vec<f64>> {
        let mut m = MemoryDecoder::new(self, store, memory.clone());
        let lp = m.log_probs(&[prefix.to_vec()])?.remove(0);
        Ok(lp.into_iter().map(f64::exp).collect())
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - z).collect()
}

/// Source of next-token log-probabilities for a batch of prefixes.
pub trait StepModel {
    fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

/// Decodes against one fixed memory.
pub struct MemoryDecoder<'a, T: Scalar> {
    generator: &'a Generator,
    store: &'a ParameterStore<T>,
    memory: Tensor<T>,
}

impl<'a, T: Scalar> MemoryDecoder<'a, T> {
    pub fn new(generator: &'a Generator, store: &'a ParameterStore<T>, memory: Tensor<T>) -> Self {
        Self {
            generator,
            store,
            memory,
        }
    }
}

impl<T: Scalar> StepModel for MemoryDecoder<'_, T> {
    fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(self.store);
        let m = g.constant(self.memory.clone());
        let ranges = [0..self.memory.rows()];
        let owners = vec![0; prefixes.len()];
        let logits = self.generator.decode(&mut g, m, &ranges, &owners, prefixes)?;
        let logits = g.value(logits);
        let mut out = Vec::with_capacity(prefixes.len());
        let mut end = 0;
        for p in prefixes {
            end += p.len();
            let row: Vec<f64> = logits.row(end - 1).iter().map(|v| v.as_f64()).collect();
            out.push(log_softmax(&row));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens, EOS included when finished, BOS excluded.
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn normalized_score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 || self.tokens.is_empty() {
            self.score
        } else {
            self.score / (self.tokens.len() as f64).powf(alpha)
        }
    }

    /// Content tokens, without the trailing EOS.
    pub fn content(&self, eos: u32) -> &[u32] {
        match self.tokens.split_last() {
            Some((&last, rest)) if self.finished && last == eos => rest,
            _ => &self.tokens,
        }
    }
}

/// Special ids for a search.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchTokens {
    pub bos: u32,
    pub eos: u32,
    /// Never generated.
    pub banned: Vec<u32>,
}

/// Ranking order: higher score, then earlier EOS, then smaller token ids.
pub fn rank(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    let eos_at = |h: &Hypothesis| if h.finished { h.tokens.len() } else { usize::MAX };
    b.normalized_score(alpha)
        .total_cmp(&a.normalized_score(alpha))
        .then_with(|| eos_at(a).cmp(&eos_at(b)))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search maximizing summed log-probability.
///
/// Each step expands every live hypothesis by every allowed token and keeps
/// the best `beam_width` expansions overall; those ending in EOS move to the
/// finished pool. The result is the best finished hypothesis, or the best
/// unfinished one if none finished within `max_decode_len` tokens. With width
/// above one, the greedy hypothesis also competes for the result, so beam
/// search never returns anything scoring below greedy decoding.
pub fn beam_search(model: &mut dyn StepModel, cfg: &GenerationConfig, tokens: &SearchTokens) -> Result<Hypothesis> {
    cfg.validate()?;
    let best = search(model, cfg.beam_width, cfg, tokens)?;
    if cfg.beam_width == 1 {
        return Ok(best);
    }
    let greedy = search(model, 1, cfg, tokens)?;
    let preferred = |h: &Hypothesis| h.finished;
    Ok(match (preferred(&best), preferred(&greedy)) {
        (true, false) => best,
        (false, true) => greedy,
        _ if rank(&greedy, &best, cfg.alpha) == Ordering::Less => greedy,
        _ => best,
    })
}

/// Greedy argmax decoding; identical to `beam_search` with width 1.
pub fn greedy_search(model: &mut dyn StepModel, cfg: &GenerationConfig, tokens: &SearchTokens) -> Result<Hypothesis> {
    cfg.validate()?;
    search(model, 1, cfg, tokens)
}

fn search(
    model: &mut dyn StepModel,
    width: usize,
    cfg: &GenerationConfig,
    tokens: &SearchTokens,
) -> Result<Hypothesis> {
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut finished = Vec::new();
    for _ in 0..cfg.max_decode_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<u32>> = live
            .iter()
            .map(|h| std::iter::once(tokens.bos).chain(h.tokens.iter().copied()).collect())
            .collect();
        let log_probs = model.log_probs(&prefixes)?;
        let mut expansions = Vec::new();
        for (h, lp) in live.iter().zip(&log_probs) {
            for (t, &l) in lp.iter().enumerate() {
                let t = t as u32;
                if l == f64::NEG_INFINITY || tokens.banned.contains(&t) {
                    continue;
                }
                let mut next = h.tokens.clone();
                next.push(t);
                expansions.push(Hypothesis {
                    tokens: next,
                    score: h.score + l,
                    finished: t == tokens.eos,
                });
            }
        }
        expansions.sort_by(|a, b| rank(a, b, 0.0));
        expansions.truncate(width);
        live.clear();
        for e in expansions {
            if e.finished {
                finished.push(e);
            } else {
                live.push(e);
            }
        }
    }
    let pool = if finished.is_empty() { live } else { finished };
    Ok(pool
        .into_iter()
        .min_by(|a, b| rank(a, b, cfg.alpha))
        .unwrap_or(Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            finished: false,
        }))
}
