//! History augmentations. Masking marks slots, never removes them, so an
//! augmented sequence stays aligned with its original.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{MinerConfig, ResponseSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationStrategy {
    SessionMask,
    RandomMask,
    Reorder,
    ShortIntervalMask,
}

impl AugmentationStrategy {
    pub const ALL: [AugmentationStrategy; 4] = [
        Self::SessionMask,
        Self::RandomMask,
        Self::Reorder,
        Self::ShortIntervalMask,
    ];

    /// Order tried when the sampled strategy does not apply.
    pub const FALLBACK: [AugmentationStrategy; 4] = [
        Self::RandomMask,
        Self::Reorder,
        Self::SessionMask,
        Self::ShortIntervalMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SessionMask => "session_mask",
            Self::RandomMask => "random_mask",
            Self::Reorder => "reorder",
            Self::ShortIntervalMask => "short_interval_mask",
        }
    }
}

impl fmt::Display for AugmentationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The strategy's precondition does not hold for this sequence.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{strategy} not applicable: {reason}")]
pub struct AugmentError {
    pub strategy: AugmentationStrategy,
    pub reason: &'static str,
}

fn inapplicable(strategy: AugmentationStrategy, reason: &'static str) -> AugmentError {
    AugmentError { strategy, reason }
}

pub fn augment_history(
    seq: &ResponseSequence,
    strategy: AugmentationStrategy,
    cfg: &MinerConfig,
    rng: &mut impl Rng,
) -> Result<ResponseSequence, AugmentError> {
    if seq.len() < 2 {
        return Err(inapplicable(strategy, "fewer than two responses"));
    }
    let mut out = seq.clone();
    match strategy {
        AugmentationStrategy::SessionMask => {
            let addressees: BTreeSet<&str> = seq.entries.iter().map(|e| e.addressee_id.as_str()).collect();
            if addressees.len() < 2 {
                return Err(inapplicable(strategy, "fewer than two addressees"));
            }
            let candidates: Vec<&str> = addressees
                .into_iter()
                .filter(|a| seq.entries.iter().any(|e| !e.masked && e.addressee_id != *a))
                .collect();
            let Some(chosen) = candidates.choose(rng).map(|s| s.to_string()) else {
                return Err(inapplicable(strategy, "every addressee covers all unmasked responses"));
            };
            for e in &mut out.entries {
                if e.addressee_id == chosen {
                    e.masked = true;
                }
            }
        }
        AugmentationStrategy::RandomMask => {
            let open: Vec<usize> = (0..seq.len()).filter(|&i| !seq.entries[i].masked).collect();
            if open.len() < 2 {
                return Err(inapplicable(strategy, "fewer than two unmasked responses"));
            }
            let target = (cfg.k_percent / 100.0 * seq.len() as f64).round() as usize;
            let count = target.min(open.len() - 1);
            for i in rand::seq::index::sample(rng, open.len(), count) {
                out.entries[open[i]].masked = true;
            }
        }
        AugmentationStrategy::Reorder => {
            let cross = |s: &ResponseSequence| -> Vec<(usize, usize)> {
                let mut pairs = Vec::new();
                for i in 0..s.len() {
                    for j in i + 1..s.len() {
                        if s.entries[i].addressee_id != s.entries[j].addressee_id {
                            pairs.push((i, j));
                        }
                    }
                }
                pairs
            };
            if cross(seq).is_empty() {
                return Err(inapplicable(strategy, "no pair of responses to different addressees"));
            }
            for _ in 0..cfg.swaps_for(seq.len()) {
                let pairs = cross(&out);
                let &(i, j) = pairs.choose(rng).expect("swaps preserve the addressee multiset");
                out.entries.swap(i, j);
            }
        }
        AugmentationStrategy::ShortIntervalMask => {
            let latter: Vec<usize> = (1..seq.len())
                .filter(|&k| (seq.entries[k].timestamp - seq.entries[k - 1].timestamp).abs() <= cfg.t_hat)
                .collect();
            if latter.is_empty() {
                return Err(inapplicable(strategy, "no consecutive pair within t_hat"));
            }
            let n = seq.len();
            let keep = n.div_ceil(2);
            let budget = seq.unmasked().saturating_sub(keep);
            let mut masked = 0;
            for k in latter {
                if masked == budget {
                    break;
                }
                if !out.entries[k].masked {
                    out.entries[k].masked = true;
                    masked += 1;
                }
            }
            if masked == 0 {
                return Err(inapplicable(strategy, "masking would leave fewer than half unmasked"));
            }
        }
    }
    Ok(out)
}

/// Draws one strategy uniformly; if it does not apply, tries the others in
/// [`AugmentationStrategy::FALLBACK`] order. `None` when nothing applies.
pub fn sample_augmentation(
    seq: &ResponseSequence,
    cfg: &MinerConfig,
    rng: &mut impl Rng,
) -> Option<(AugmentationStrategy, ResponseSequence)> {
    let first = *AugmentationStrategy::ALL.choose(rng).expect("non-empty");
    std::iter::once(first)
        .chain(AugmentationStrategy::FALLBACK.into_iter().filter(|s| *s != first))
        .find_map(|s| augment_history(seq, s, cfg, rng).ok().map(|out| (s, out)))
}
