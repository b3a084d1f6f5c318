//! Utterance encoder (response tokens → vector) and history encoder
//! (sequence of utterance vectors → user profile), both mean-pooled.
//!
//! Batches are packed: all utterances of a step are stacked along the row
//! axis and run through each projection as one matrix product, with
//! block-diagonal attention keeping them independent.

use std::rc::Rc;

use chatprof_autograd::transformer::packed_positions;
use chatprof_autograd::{
    AttentionLayout, Encoder, Graph, Init, ParamId, ParameterStore, Scalar, Tensor, TransformerConfig, Var,
};
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, MASK, PAD};
use crate::error::{Error, Result};

pub const UTTERANCE_PREFIX: &str = "utt.";
pub const HISTORY_PREFIX: &str = "hist.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub utterance: TransformerConfig,
    pub history: TransformerConfig,
    /// Let history- and user-level losses update the utterance encoder.
    pub joint_encoder_grad: bool,
    /// Ablation: utterance vector = mean of raw token embeddings. Set from
    /// the run's ablation switches, not serialized here.
    #[serde(skip)]
    pub no_utterance_encoder: bool,
    /// Ablation: profile = mean of utterance vectors.
    #[serde(skip)]
    pub no_history_encoder: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            utterance: TransformerConfig {
                max_positions: 32,
                ..Default::default()
            },
            history: TransformerConfig {
                max_positions: 32,
                ..Default::default()
            },
            joint_encoder_grad: true,
            no_utterance_encoder: false,
            no_history_encoder: false,
        }
    }
}

/// A history slot: a row of the utterance matrix, or the mask vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Utterance(usize),
    Masked,
}

/// One history to encode. `padding` extra slots take no part in attention
/// or pooling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryInput {
    pub slots: Vec<Slot>,
    pub padding: usize,
}

impl HistoryInput {
    pub fn new(slots: Vec<Slot>) -> Self {
        Self { slots, padding: 0 }
    }
}

/// Both profile encoders and their parameters' names.
#[derive(Clone, Debug)]
pub struct ProfileEncoders {
    cfg: EncoderConfig,
    token_embedding: ParamId,
    utterance: Encoder,
    mask_vector: ParamId,
    history: Encoder,
}

impl ProfileEncoders {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, cfg: &EncoderConfig, vocab_size: usize) -> Result<Self> {
        if cfg.utterance.hidden_size != cfg.history.hidden_size {
            return Err(Error::Usage(format!(
                "utterance hidden_size {} must equal history hidden_size {}",
                cfg.utterance.hidden_size, cfg.history.hidden_size
            )));
        }
        let d = cfg.utterance.hidden_size;
        let token_embedding = store.register("utt.token_embedding", vocab_size, d, Init::FanIn(d))?;
        let utterance = Encoder::new(store, "utt.encoder", &cfg.utterance)?;
        let mask_vector = store.register("hist.mask_vector", 1, d, Init::FanIn(d))?;
        let history = Encoder::new(store, "hist.encoder", &cfg.history)?;
        Ok(Self {
            cfg: cfg.clone(),
            token_embedding,
            utterance,
            mask_vector,
            history,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn hidden_size(&self) -> usize {
        self.cfg.utterance.hidden_size
    }

    /// Head-truncated token list; empty input becomes the mask token.
    fn prepare(&self, tokens: &[u32]) -> Vec<u32> {
        if tokens.is_empty() {
            log::debug!("empty utterance encoded as the mask token");
            return vec![MASK];
        }
        tokens[..tokens.len().min(self.cfg.utterance.max_positions)].to_vec()
    }

    /// Mean-pooled utterance vectors, one row per input.
    pub fn utterances<T: Scalar>(&self, g: &mut Graph<'_, T>, token_lists: &[Vec<u32>]) -> Result<Var> {
        let padded: Vec<(Vec<u32>, usize)> = token_lists.iter().map(|t| (t.clone(), 0)).collect();
        self.utterances_padded(g, &padded)
    }

    /// Like [`Self::utterances`], with `pad` trailing PAD tokens appended to
    /// each input. Padding is masked out of attention and pooling.
    pub fn utterances_padded<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &[(Vec<u32>, usize)]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Data("no utterances to encode".into()));
        }
        let d = self.hidden_size();
        let mut ids = Vec::new();
        let mut lengths = Vec::with_capacity(inputs.len());
        let mut valid = Vec::new();
        let mut segments = Vec::with_capacity(inputs.len());
        for (tokens, pad) in inputs {
            let tokens = self.prepare(tokens);
            let start = ids.len();
            segments.push((start..start + tokens.len()).collect::<Vec<_>>());
            valid.extend(std::iter::repeat_n(true, tokens.len()));
            valid.extend(std::iter::repeat_n(false, *pad));
            ids.extend(&tokens);
            ids.extend(std::iter::repeat_n(PAD, *pad));
            lengths.push(tokens.len() + pad);
        }
        let table = g.param(self.token_embedding);
        let x = g.gather_rows(table, ids.iter().map(|&t| t as usize).collect());
        let x = g.scale(x, (d as f64).sqrt());
        if self.cfg.no_utterance_encoder {
            return Ok(g.segment_mean(x, segments));
        }
        let pos = g.constant(packed_positions(&lengths, 0, d));
        let x = g.add(x, pos);
        let mut layout = AttentionLayout::packed_self(&lengths, false);
        layout.key_valid = valid;
        let h = self.utterance.forward(g, x, &Rc::new(layout))?;
        Ok(g.segment_mean(h, segments))
    }

    /// User profiles, one row per history. `utterances` are the rows
    /// referenced by [`Slot::Utterance`].
    pub fn profiles<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        utterances: Var,
        histories: &[HistoryInput],
    ) -> Result<Var> {
        if histories.is_empty() {
            return Err(Error::Data("no histories to encode".into()));
        }
        let d = self.hidden_size();
        let (n_utt, _) = g.shape(utterances);
        let utterances = if self.cfg.joint_encoder_grad {
            utterances
        } else {
            let v = g.value(utterances).clone();
            g.constant(v)
        };
        let mask = g.param(self.mask_vector);
        let source = g.concat_rows(&[utterances, mask]);
        let mask_row = n_utt;

        let mut rows = Vec::new();
        let mut lengths = Vec::with_capacity(histories.len());
        let mut valid = Vec::new();
        let mut segments = Vec::with_capacity(histories.len());
        for h in histories {
            if h.slots.is_empty() {
                return Err(Error::Data("history with every position padded".into()));
            }
            if h.slots.len() > self.cfg.history.max_positions {
                return Err(Error::Usage(format!(
                    "history of {} responses exceeds history max_positions {}",
                    h.slots.len(),
                    self.cfg.history.max_positions
                )));
            }
            let start = rows.len();
            segments.push((start..start + h.slots.len()).collect::<Vec<_>>());
            for s in &h.slots {
                rows.push(match *s {
                    Slot::Utterance(i) if i < n_utt => i,
                    Slot::Utterance(i) => {
                        return Err(Error::Data(format!("history references utterance {i} of {n_utt}")))
                    }
                    Slot::Masked => mask_row,
                });
            }
            // Padding content is irrelevant; reuse the mask row.
            rows.extend(std::iter::repeat_n(mask_row, h.padding));
            valid.extend(std::iter::repeat_n(true, h.slots.len()));
            valid.extend(std::iter::repeat_n(false, h.padding));
            lengths.push(h.slots.len() + h.padding);
        }
        let x = g.gather_rows(source, rows);
        if self.cfg.no_history_encoder {
            return Ok(g.segment_mean(x, segments));
        }
        let pos = g.constant(packed_positions(&lengths, 0, d));
        let x = g.add(x, pos);
        let mut layout = AttentionLayout::packed_self(&lengths, false);
        layout.key_valid = valid;
        let h = self.history.forward(g, x, &Rc::new(layout))?;
        Ok(g.segment_mean(h, segments))
    }
}

/// Rows of a tensor as `f64` vectors.
pub fn rows_f64<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v.as_f64()).collect())
        .collect()
}

/// Encodes every text with a no-gradient pass, in chunks.
pub fn encode_texts(
    store: &ParameterStore<f32>,
    encoders: &ProfileEncoders,
    vocab: &Vocabulary,
    texts: &[&str],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(256) {
        let tokens: Vec<Vec<u32>> = chunk.iter().map(|t| vocab.tokenize(t)).collect();
        let mut g = Graph::new(store);
        let v = encoders.utterances(&mut g, &tokens)?;
        out.extend(rows_f64(g.value(v)));
    }
    Ok(out)
}
