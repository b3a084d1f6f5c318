//! Contrastive pre-training losses and the generation cross-entropy.
//!
//! Every contrastive loss is InfoNCE with `φ(a, b) = exp(cos(a, b))` and no
//! temperature. Pure `f64` versions serve as references; the graph versions
//! compute the same quantity as a softmax cross-entropy over a cosine matrix.

use chatprof_autograd::{Graph, Scalar, Var, ZERO_NORM_COSINES};
use serde::{Deserialize, Serialize};
use std::sync::atomic::Ordering;

use crate::error::{Error, Result};

/// Which in-batch elements serve as negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// The positives of the other N−1 pairs.
    #[default]
    PositivesOnly,
    /// Positives and anchors of the other pairs (2N−2 negatives).
    BothSides,
}

/// Cosine similarity; 0 (with a warning) when either vector has zero norm.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(
        u.len(),
        v.len(),
        "cosine_similarity: lengths {} and {}",
        u.len(),
        v.len()
    );
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        ZERO_NORM_COSINES.fetch_add(1, Ordering::Relaxed);
        log::warn!("cosine similarity with a zero-norm vector; using 0");
        return 0.0;
    }
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// `-ln[φ(a,p) / (φ(a,p) + Σ φ(a,n))]`, computed stably.
pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[&[f64]]) -> f64 {
    let pos = cosine_similarity(anchor, positive);
    let sims: Vec<f64> = negatives.iter().map(|n| cosine_similarity(anchor, n)).collect();
    let max = sims.iter().copied().fold(pos, f64::max);
    let z: f64 = (pos - max).exp() + sims.iter().map(|s| (s - max).exp()).sum::<f64>();
    (z.ln() + max - pos).max(0.0)
}

/// N aligned (anchor, positive) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
}

impl ContrastiveBatch {
    pub fn new(anchors: Vec<Vec<f64>>, positives: Vec<Vec<f64>>) -> Result<Self> {
        if anchors.is_empty() || anchors.len() != positives.len() {
            return Err(Error::Usage(format!(
                "contrastive batch needs N >= 1 aligned pairs, got {} anchors and {} positives",
                anchors.len(),
                positives.len()
            )));
        }
        let d = anchors[0].len();
        if anchors.iter().chain(&positives).any(|v| v.len() != d) {
            return Err(Error::Usage("contrastive batch vectors differ in length".into()));
        }
        Ok(Self { anchors, positives })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Mean InfoNCE over the batch with in-batch negatives.
pub fn batch_contrastive_loss(batch: &ContrastiveBatch, mode: NegativeMode) -> f64 {
    let n = batch.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut negatives: Vec<&[f64]> = Vec::new();
        for j in (0..n).filter(|&j| j != i) {
            negatives.push(&batch.positives[j]);
            if mode == NegativeMode::BothSides {
                negatives.push(&batch.anchors[j]);
            }
        }
        total += info_nce(&batch.anchors[i], &batch.positives[i], &negatives);
    }
    total / n as f64
}

/// Utterance level: anchors and positives are the two responses of each pair.
pub fn batch_utterance_loss(batch: &ContrastiveBatch) -> f64 {
    batch_contrastive_loss(batch, NegativeMode::PositivesOnly)
}

/// History level: original profiles against augmented profiles.
pub fn batch_sequence_loss(originals: &[Vec<f64>], augmenteds: &[Vec<f64>]) -> Result<f64> {
    let b = ContrastiveBatch::new(originals.to_vec(), augmenteds.to_vec())?;
    Ok(batch_contrastive_loss(&b, NegativeMode::PositivesOnly))
}

/// User level: profiles against the profiles of similar users.
pub fn batch_user_loss(profiles: &[Vec<f64>], similar: &[Vec<f64>]) -> Result<f64> {
    let b = ContrastiveBatch::new(profiles.to_vec(), similar.to_vec())?;
    Ok(batch_contrastive_loss(&b, NegativeMode::PositivesOnly))
}

/// Graph form of [`batch_contrastive_loss`] over row-aligned `anchors` and
/// `positives`. The softmax over `cos(a_i, ·)` with target `i` is exactly the
/// InfoNCE term, so this is a cross-entropy over the cosine matrix.
pub fn contrastive_loss<T: Scalar>(g: &mut Graph<'_, T>, anchors: Var, positives: Var, mode: NegativeMode) -> Var {
    let (n, _) = g.shape(anchors);
    assert_eq!(g.shape(positives).0, n, "contrastive_loss: misaligned batch");
    let targets = (0..n).map(Some).collect();
    match mode {
        NegativeMode::PositivesOnly => {
            let sims = g.cosine_matrix(anchors, positives);
            g.cross_entropy(sims, targets, None)
        }
        NegativeMode::BothSides => {
            let keys = g.concat_rows(&[positives, anchors]);
            let sims = g.cosine_matrix(anchors, keys);
            let mut valid = vec![true; n * 2 * n];
            for i in 0..n {
                valid[i * 2 * n + n + i] = false;
            }
            g.cross_entropy(sims, targets, Some(&valid))
        }
    }
}

/// Relative weights of the three terms; unweighted by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub utt: f64,
    pub seq: f64,
    pub user: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            utt: 1.0,
            seq: 1.0,
            user: 1.0,
        }
    }
}

/// One term's value and the number of pairs it was computed on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermValue {
    pub loss: f64,
    pub pairs: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermCounts {
    pub utt: usize,
    pub seq: usize,
    pub user: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermFlags {
    pub utt: bool,
    pub seq: bool,
    pub user: bool,
}

/// Per-step pre-training loss breakdown; one line of the training log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_utt: f64,
    pub l_seq: f64,
    pub l_user: f64,
    pub l_total: f64,
    pub counts: TermCounts,
    /// Terms whose batch was absent this step and contributed 0.
    pub absent: TermFlags,
}

/// Combines the three terms; an absent term contributes 0 and is flagged.
pub fn pretraining_loss(
    utt: Option<TermValue>,
    seq: Option<TermValue>,
    user: Option<TermValue>,
    weights: &LossWeights,
) -> LossReport {
    let value = |t: Option<TermValue>| t.map_or((0.0, 0), |t| (t.loss, t.pairs));
    let (l_utt, n_utt) = value(utt);
    let (l_seq, n_seq) = value(seq);
    let (l_user, n_user) = value(user);
    LossReport {
        l_utt,
        l_seq,
        l_user,
        l_total: weights.utt * l_utt + weights.seq * l_seq + weights.user * l_user,
        counts: TermCounts {
            utt: n_utt,
            seq: n_seq,
            user: n_user,
        },
        absent: TermFlags {
            utt: utt.is_none(),
            seq: seq.is_none(),
            user: user.is_none(),
        },
    }
}

/// Mean over non-pad targets of `-ln p(target)`, from per-step distributions.
pub fn generation_loss(distributions: &[Vec<f64>], targets: &[u32], pad: u32) -> Result<f64> {
    if distributions.len() != targets.len() {
        return Err(Error::Usage(format!(
            "{} distributions for {} targets",
            distributions.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, &t) in distributions.iter().zip(targets) {
        if t == pad {
            continue;
        }
        let Some(&pt) = p.get(t as usize) else {
            return Err(Error::Numeric(format!(
                "target id {t} outside vocabulary of {}",
                p.len()
            )));
        };
        total -= pt.ln();
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
