//! Packed multi-head attention.
//!
//! Several independent sequences are stacked along the row axis of one
//! matrix. An [`AttentionLayout`] lists, per sequence, which query rows may
//! look at which key rows, so a whole batch runs through each projection as a
//! single matrix product while attention stays block-diagonal.

use std::ops::Range;

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionBlock {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub blocks: Vec<AttentionBlock>,
    /// One flag per key row; `false` rows are never attended to.
    pub key_valid: Vec<bool>,
    /// Query offset `i` within a block only sees key offsets `<= i`.
    pub causal: bool,
}

impl AttentionLayout {
    /// Self-attention over consecutive segments of the given lengths.
    pub fn packed_self(lengths: &[usize], causal: bool) -> Self {
        let mut blocks = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            blocks.push(AttentionBlock {
                queries: start..start + len,
                keys: start..start + len,
            });
            start += len;
        }
        Self {
            blocks,
            key_valid: vec![true; start],
            causal,
        }
    }

    /// Single self-attention block with an explicit key mask.
    pub fn masked_self(key_valid: Vec<bool>) -> Self {
        let n = key_valid.len();
        Self {
            blocks: vec![AttentionBlock {
                queries: 0..n,
                keys: 0..n,
            }],
            key_valid,
            causal: false,
        }
    }

    /// Cross-attention: query segment `i` attends to key range `keys[i]`.
    pub fn packed_cross(query_lengths: &[usize], keys: &[Range<usize>], num_keys: usize) -> Self {
        assert_eq!(query_lengths.len(), keys.len(), "one key range per query segment");
        let mut blocks = Vec::with_capacity(keys.len());
        let mut start = 0;
        for (&len, k) in query_lengths.iter().zip(keys) {
            blocks.push(AttentionBlock {
                queries: start..start + len,
                keys: k.clone(),
            });
            start += len;
        }
        Self {
            blocks,
            key_valid: vec![true; num_keys],
            causal: false,
        }
    }

    pub fn check(&self, query_rows: usize, key_rows: usize) -> Result<(), String> {
        if self.key_valid.len() != key_rows {
            return Err(format!(
                "attention mask covers {} keys but key matrix has {} rows",
                self.key_valid.len(),
                key_rows
            ));
        }
        for b in &self.blocks {
            if b.queries.end > query_rows || b.keys.end > key_rows {
                return Err(format!(
                    "attention block {:?}->{:?} exceeds {}x{} rows",
                    b.queries, b.keys, query_rows, key_rows
                ));
            }
        }
        Ok(())
    }

    fn allowed(&self, block: &AttentionBlock, qi: usize, kj: usize) -> bool {
        self.key_valid[block.keys.start + kj] && (!self.causal || kj <= qi)
    }
}

/// Saved forward state: per block and head, the `nq × nk` probabilities.
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    pub probs: Vec<Vec<T>>,
    /// Rows with no admissible key; they attend to their own offset.
    pub degenerate: Vec<Vec<bool>>,
}

pub(crate) fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    layout: &AttentionLayout,
) -> (Tensor<T>, AttentionCache<T>) {
    let d = q.cols();
    assert_eq!(k.cols(), d, "attention: key width {} != query width {}", k.cols(), d);
    assert_eq!(v.cols(), d, "attention: value width {} != query width {}", v.cols(), d);
    assert_eq!(k.rows(), v.rows(), "attention: key/value row counts differ");
    assert!(
        heads > 0 && d.is_multiple_of(heads),
        "hidden {d} not divisible by {heads} heads"
    );
    if let Err(msg) = layout.check(q.rows(), k.rows()) {
        panic!("{msg}");
    }
    let dh = d / heads;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut out = Tensor::zeros(q.rows(), d);
    let mut probs = Vec::with_capacity(layout.blocks.len() * heads);
    let mut degenerate = Vec::with_capacity(layout.blocks.len());

    for block in &layout.blocks {
        let nq = block.queries.len();
        let nk = block.keys.len();
        let mut deg = vec![false; nq];
        for (qi, flag) in deg.iter_mut().enumerate() {
            *flag = !(0..nk).any(|kj| layout.allowed(block, qi, kj));
        }
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = vec![T::zero(); nq * nk];
            for qi in 0..nq {
                let row = &mut p[qi * nk..(qi + 1) * nk];
                if deg[qi] {
                    if qi < nk {
                        row[qi] = T::one();
                    } else {
                        let u = T::one() / T::from_usize(nk.max(1)).unwrap();
                        row.iter_mut().for_each(|x| *x = u);
                    }
                    continue;
                }
                let qrow = &q.row(block.queries.start + qi)[cols.clone()];
                let mut max = T::neg_infinity();
                for (kj, slot) in row.iter_mut().enumerate() {
                    if layout.allowed(block, qi, kj) {
                        let krow = &k.row(block.keys.start + kj)[cols.clone()];
                        let s = qrow.iter().zip(krow).map(|(a, b)| *a * *b).sum::<T>() * scale;
                        *slot = s;
                        if s > max {
                            max = s;
                        }
                    }
                }
                let mut total = T::zero();
                for (kj, slot) in row.iter_mut().enumerate() {
                    if layout.allowed(block, qi, kj) {
                        *slot = (*slot - max).exp();
                        total += *slot;
                    } else {
                        *slot = T::zero();
                    }
                }
                row.iter_mut().for_each(|x| *x = *x / total);
            }
            for qi in 0..nq {
                let orow = &mut out.row_mut(block.queries.start + qi)[cols.clone()];
                for kj in 0..nk {
                    let w = p[qi * nk + kj];
                    if w == T::zero() {
                        continue;
                    }
                    let vrow = &v.row(block.keys.start + kj)[cols.clone()];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += w * *x;
                    }
                }
            }
            probs.push(p);
        }
        degenerate.push(deg);
    }
    (out, AttentionCache { probs, degenerate })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    layout: &AttentionLayout,
    cache: &AttentionCache<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = q.cols();
    let dh = d / heads;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut dq = Tensor::zeros(q.rows(), d);
    let mut dk = Tensor::zeros(k.rows(), d);
    let mut dv = Tensor::zeros(v.rows(), d);

    for (b, block) in layout.blocks.iter().enumerate() {
        let nq = block.queries.len();
        let nk = block.keys.len();
        let deg = &cache.degenerate[b];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &cache.probs[b * heads + h];
            let mut dp = vec![T::zero(); nk];
            for qi in 0..nq {
                let qr = block.queries.start + qi;
                let dorow = &dout.row(qr)[cols.clone()];
                let prow = &p[qi * nk..(qi + 1) * nk];
                let mut dot = T::zero();
                for kj in 0..nk {
                    let w = prow[kj];
                    let vrow = &v.row(block.keys.start + kj)[cols.clone()];
                    dp[kj] = dorow.iter().zip(vrow).map(|(a, b)| *a * *b).sum();
                    dot += w * dp[kj];
                    if w != T::zero() {
                        let dvrow = &mut dv.row_mut(block.keys.start + kj)[cols.clone()];
                        for (g, x) in dvrow.iter_mut().zip(dorow) {
                            *g += w * *x;
                        }
                    }
                }
                if deg[qi] {
                    continue;
                }
                for kj in 0..nk {
                    let w = prow[kj];
                    if w == T::zero() {
                        continue;
                    }
                    let ds = w * (dp[kj] - dot) * scale;
                    let kr = block.keys.start + kj;
                    for c in cols.clone() {
                        let qv = q.get(qr, c);
                        let kv = k.get(kr, c);
                        dq.data_mut()[qr * d + c] += ds * kv;
                        dk.data_mut()[kr * d + c] += ds * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
