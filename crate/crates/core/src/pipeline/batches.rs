use std::collections::HashMap;

use chatprof_autograd::{Graph, Scalar, Var};

use crate::corpus::{Corpus, Vocabulary};
use crate::encoders::{HistoryInput, ProfileEncoders, Slot};
use crate::error::{Error, Result};
use crate::mining::{AugmentedSequencePair, ResponsePair, ResponseSequence, UserPair};
use crate::objectives::{contrastive_loss, pretraining_loss, LossReport, TermValue};

use super::ObjectiveConfig;

/// Deduplicated utterances of one step, addressed by (user, position).
pub(crate) struct UtteranceBank<'a> {
    corpus: &'a Corpus,
    vocab: &'a Vocabulary,
    pub tokens: Vec<Vec<u32>>,
    seen: HashMap<(&'a str, usize), usize>,
}

impl<'a> UtteranceBank<'a> {
    pub fn new(corpus: &'a Corpus, vocab: &'a Vocabulary) -> Self {
        Self {
            corpus,
            vocab,
            tokens: Vec::new(),
            seen: HashMap::new(),
        }
    }

    pub fn source(&mut self, user: &'a str, position: usize) -> Result<usize> {
        if let Some(&row) = self.seen.get(&(user, position)) {
            return Ok(row);
        }
        let t = self
            .corpus
            .user(user)
            .and_then(|h| h.triples.get(position))
            .ok_or_else(|| Error::Data(format!("user {user}: no response at position {position}")))?;
        let row = self.tokens.len();
        self.tokens.push(self.vocab.tokenize(&t.response_text));
        self.seen.insert((user, position), row);
        Ok(row)
    }

    pub fn sequence(&mut self, user: &'a str, seq: &ResponseSequence) -> Result<HistoryInput> {
        let slots = seq
            .entries
            .iter()
            .map(|e| {
                Ok(if e.masked {
                    Slot::Masked
                } else {
                    Slot::Utterance(self.source(user, e.source)?)
                })
            })
            .collect::<Result<_>>()?;
        Ok(HistoryInput::new(slots))
    }

    pub fn positions(&mut self, user: &'a str, positions: &[usize]) -> Result<HistoryInput> {
        let slots = positions
            .iter()
            .map(|&p| Ok(Slot::Utterance(self.source(user, p)?)))
            .collect::<Result<_>>()?;
        Ok(HistoryInput::new(slots))
    }
}

/// One pre-training step's pairs, one list per objective. Empty lists mean
/// the objective is absent this step.
#[derive(Clone, Debug, Default)]
pub struct PretrainBatch<'a> {
    pub response: Vec<&'a ResponsePair>,
    pub augmented: Vec<&'a AugmentedSequencePair>,
    pub user: Vec<&'a UserPair>,
}

/// Summed contrastive loss of one step. `corpus` is the corpus the pairs were
/// mined from. Returns `None` for the loss when every list is empty.
pub fn pretraining_step<'c, T: Scalar>(
    g: &mut Graph<'_, T>,
    encoders: &ProfileEncoders,
    vocab: &'c Vocabulary,
    corpus: &'c Corpus,
    batch: &PretrainBatch<'c>,
    history_len: usize,
    objectives: &ObjectiveConfig,
) -> Result<(Option<Var>, LossReport)> {
    let mut bank = UtteranceBank::new(corpus, vocab);
    let mut anchors = Vec::new();
    let mut positives = Vec::new();
    for p in &batch.response {
        anchors.push(bank.source(&p.user_id, p.positions.0)?);
        positives.push(bank.source(&p.user_id, p.positions.1)?);
    }
    let mut histories = Vec::new();
    for p in &batch.augmented {
        histories.push(bank.sequence(&p.user_id, &p.original)?);
    }
    for p in &batch.augmented {
        histories.push(bank.sequence(&p.user_id, &p.augmented)?);
    }
    for side in 0..2 {
        for p in &batch.user {
            let id = if side == 0 { &p.user_a } else { &p.user_b };
            let h = corpus
                .user(id)
                .ok_or_else(|| Error::Data(format!("user pair names unknown user {id}")))?;
            histories.push(bank.sequence(id, &ResponseSequence::from_history(h, history_len))?);
        }
    }
    if bank.tokens.is_empty() {
        return Ok((None, pretraining_loss(None, None, None, &objectives.weights)));
    }

    let utt = encoders.utterances(g, &bank.tokens)?;
    let mode = objectives.negatives;
    let mut terms = Vec::new();
    let mut value = |g: &mut Graph<'_, T>, loss: Var, pairs: usize, weight: f64| {
        terms.push(g.scale(loss, weight));
        Some(TermValue {
            loss: g.value(loss).data()[0].as_f64(),
            pairs,
        })
    };

    let l_utt = if batch.response.is_empty() {
        None
    } else {
        let a = g.gather_rows(utt, anchors);
        let p = g.gather_rows(utt, positives);
        let l = contrastive_loss(g, a, p, mode);
        value(g, l, batch.response.len(), objectives.weights.utt)
    };
    let (l_seq, l_user) = if histories.is_empty() {
        (None, None)
    } else {
        let profiles = encoders.profiles(g, utt, &histories)?;
        let n_seq = batch.augmented.len();
        let n_user = batch.user.len();
        let l_seq = if n_seq == 0 {
            None
        } else {
            let a = g.slice_rows(profiles, 0, n_seq);
            let p = g.slice_rows(profiles, n_seq, n_seq);
            let l = contrastive_loss(g, a, p, mode);
            value(g, l, n_seq, objectives.weights.seq)
        };
        let l_user = if n_user == 0 {
            None
        } else {
            let a = g.slice_rows(profiles, 2 * n_seq, n_user);
            let p = g.slice_rows(profiles, 2 * n_seq + n_user, n_user);
            let l = contrastive_loss(g, a, p, mode);
            value(g, l, n_user, objectives.weights.user)
        };
        (l_seq, l_user)
    };
    let report = pretraining_loss(l_utt, l_seq, l_user, &objectives.weights);
    let total = g.add_scalars(&terms);
    Ok((Some(total), report))
}
