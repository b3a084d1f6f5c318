//! Tape of dense matrix operations with reverse-mode gradients.
//!
//! A [`Graph`] borrows a [`ParameterStore`] for one forward/backward pass.
//! Parameters enter the tape lazily through [`Graph::param`]; everything
//! else is either a constant or the output of a recorded operation.

use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_backward, attention_forward, AttentionCache, AttentionLayout};
use crate::error::NnError;
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Scalar, Tensor};

/// Number of cosine similarities evaluated with a zero-norm operand. Such
/// similarities are defined as 0.
pub static ZERO_NORM_COSINES: AtomicUsize = AtomicUsize::new(0);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<AttentionLayout>,
        cache: AttentionCache<T>,
    },
    GatherRows {
        src: Var,
        index: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Vec<usize>>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    SumAll(Var),
    CosineMatrix {
        a: Var,
        b: Var,
        a_norm: Vec<T>,
        b_norm: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'s, T: Scalar> {
    store: &'s ParameterStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    dropout_rng: Option<ChaCha8Rng>,
}

/// Gradients produced by [`Graph::backward`], indexed by tape position.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for every parameter that entered the tape.
    pub fn param_grads(mut self) -> Vec<(ParamId, Tensor<T>)> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(id, v)| self.grads[v.0].take().map(|g| (id, g)))
            .collect()
    }
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + three * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParameterStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            dropout_rng: None,
        }
    }

    /// Enables dropout, drawing masks from `rng`. Without this call dropout
    /// is the identity.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn store(&self) -> &'s ParameterStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param, &[]);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = Tensor::matmul(self.value(a), false, self.value(b), false);
        self.push(out, Op::MatMul { a, b, trans_b: false }, &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = Tensor::matmul(self.value(a), false, self.value(b), true);
        self.push(out, Op::MatMul { a, b, trans_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: {:?} vs {:?}", va.shape(), vb.shape());
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert!(
            vr.rows() == 1 && vr.cols() == va.cols(),
            "add_row: {:?} + {:?}",
            va.shape(),
            vr.shape()
        );
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += *b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: {:?} vs {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let va = self.value(a);
        let data = va.data().iter().map(|x| *x * s).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| gelu(*x).0).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Inverted dropout; identity unless the graph was built with a dropout rng.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return a;
        };
        let (rows, cols) = self.nodes[a.0].value.shape();
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask = (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let m = self.constant(Tensor::from_vec(rows, cols, mask));
        self.mul(a, m)
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let (vg, vb) = (self.value(gain), self.value(bias));
        assert!(
            vg.shape() == (1, cols) && vb.shape() == (1, cols),
            "layer_norm: input {:?}, gain {:?}, bias {:?}",
            vx.shape(),
            vg.shape(),
            vb.shape()
        );
        let n = T::from_usize(cols).unwrap();
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * vg.data()[c] + vb.data()[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Rc<AttentionLayout>) -> Var {
        let (out, cache) = attention_forward(self.value(q), self.value(k), self.value(v), heads, &layout);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                cache,
            },
            &[q, k, v],
        )
    }

    /// Attention probabilities recorded for `v`, one `nq × nk` matrix per
    /// (block, head), block-major.
    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<T>]> {
        match &self.nodes[v.0].op {
            Op::Attention { cache, .. } => Some(&cache.probs),
            _ => None,
        }
    }

    /// Row `i` of the output is row `index[i]` of `src` (embedding lookup).
    pub fn gather_rows(&mut self, src: Var, index: Vec<usize>) -> Var {
        let vs = self.value(src);
        let mut out = Tensor::zeros(index.len(), vs.cols());
        for (i, &r) in index.iter().enumerate() {
            assert!(r < vs.rows(), "gather_rows: row {r} out of range for {:?}", vs.shape());
            out.row_mut(i).copy_from_slice(vs.row(r));
        }
        self.push(out, Op::GatherRows { src, index }, &[src])
    }

    /// Row `s` of the output is the mean of rows `segments[s]` of `x`.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<Vec<usize>>) -> Var {
        let vx = self.value(x);
        let mut out = Tensor::zeros(segments.len(), vx.cols());
        for (s, rows) in segments.iter().enumerate() {
            assert!(!rows.is_empty(), "segment_mean: segment {s} is empty");
            let inv = T::one() / T::from_usize(rows.len()).unwrap();
            let orow = out.row_mut(s);
            for &r in rows {
                for (o, v) in orow.iter_mut().zip(vx.row(r)) {
                    *o += *v;
                }
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        self.push(out, Op::SegmentMean { x, segments }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let vp = self.value(*p);
            assert_eq!(vp.cols(), cols, "concat_rows: width {} vs {}", vp.cols(), cols);
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.rows(), "slice_rows {start}+{len} of {:?}", va.shape());
        let c = va.cols();
        let out = Tensor::from_vec(len, c, va.data()[start * c..(start + len) * c].to_vec());
        self.push(out, Op::SliceRows { a, start }, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Sum of `1 × 1` terms.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty(), "add_scalars of nothing");
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = self.add(acc, *t);
        }
        acc
    }

    /// `out[i][j] = cos(a_i, b_j)`; zero-norm operands give 0.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.cols(),
            vb.cols(),
            "cosine_matrix: {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let norms = |t: &Tensor<T>| -> Vec<T> {
            (0..t.rows())
                .map(|r| t.row(r).iter().map(|x| *x * *x).sum::<T>().sqrt())
                .collect()
        };
        let a_norm = norms(va);
        let b_norm = norms(vb);
        let mut out = Tensor::matmul(va, false, vb, true);
        for i in 0..va.rows() {
            for j in 0..vb.rows() {
                let denom = a_norm[i] * b_norm[j];
                if denom == T::zero() {
                    ZERO_NORM_COSINES.fetch_add(1, Ordering::Relaxed);
                    log::warn!("cosine similarity with a zero-norm vector; using 0");
                    out.set(i, j, T::zero());
                } else {
                    out.set(i, j, out.get(i, j) / denom);
                }
            }
        }
        self.push(out, Op::CosineMatrix { a, b, a_norm, b_norm }, &[a, b])
    }

    /// Mean over rows with a target of `-log softmax(row)[target]`.
    ///
    /// `valid`, when given, is a row-major mask; excluded entries take no part
    /// in the normalizer. Rows whose target is `None` are skipped. Returns 0
    /// when no row has a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>, valid: Option<&[bool]>) -> Var {
        let vl = self.value(logits);
        let (rows, cols) = vl.shape();
        assert_eq!(
            targets.len(),
            rows,
            "cross_entropy: {} targets for {} rows",
            targets.len(),
            rows
        );
        if let Some(m) = valid {
            assert_eq!(m.len(), rows * cols, "cross_entropy: mask size");
        }
        let ok = |r: usize, c: usize| valid.is_none_or(|m| m[r * cols + c]);
        let mut probs = Tensor::zeros(rows, cols);
        let mut total = T::zero();
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            assert!(
                t < cols && ok(r, t),
                "cross_entropy: target {t} invalid in row {r} of width {cols}"
            );
            let row = vl.row(r);
            let max = (0..cols)
                .filter(|&c| ok(r, c))
                .map(|c| row[c])
                .fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..cols {
                if ok(r, c) {
                    let e = (row[c] - max).exp();
                    probs.set(r, c, e);
                    z += e;
                }
            }
            for c in 0..cols {
                probs.set(r, c, probs.get(r, c) / z);
            }
            total += z.ln() + max - row[t];
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).unwrap()
        };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
            &[logits],
        )
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NnError> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(NnError::BackwardBeforeForward);
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(NnError::NonScalarLoss(r, c));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    // C = A·op(B)  =>  dA = dC·op(B)ᵀ
                    let da = Tensor::matmul(g, false, vb, !*trans_b);
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let db = if *trans_b {
                        Tensor::matmul(g, true, va, false)
                    } else {
                        Tensor::matmul(va, true, g, false)
                    };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[row.0].needs_grad {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += *x;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let prod = |x: &Tensor<T>| {
                    let d = g.data().iter().zip(x.data()).map(|(p, q)| *p * *q).collect();
                    Tensor::from_vec(g.rows(), g.cols(), d)
                };
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, prod(vb));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, prod(va));
                }
            }
            Op::Scale(a, s) => {
                let d = g.data().iter().map(|x| *x * *s).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d));
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let d = g.data().iter().zip(va.data()).map(|(gy, x)| *gy * gelu(*x).1).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let vg = self.value(*gain);
                let n = T::from_usize(cols).unwrap();
                let mut dgain = Tensor::zeros(1, cols);
                let mut dbias = Tensor::zeros(1, cols);
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for c in 0..cols {
                        dgain.data_mut()[c] += gr[c] * hr[c];
                        dbias.data_mut()[c] += gr[c];
                        let dh = gr[c] * vg.data()[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[c];
                    }
                    let scale = inv_std[r] / n;
                    for c in 0..cols {
                        let dh = gr[c] * vg.data()[c];
                        dx.set(r, c, scale * (n * dh - sum_dh - hr[c] * sum_dh_h));
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                cache,
            } => {
                let (dq, dk, dv) =
                    attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, layout, cache, g);
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::GatherRows { src, index } => {
                let (rows, cols) = self.shape(*src);
                let mut ds = Tensor::zeros(rows, cols);
                for (i, &r) in index.iter().enumerate() {
                    for (d, x) in ds.row_mut(r).iter_mut().zip(g.row(i)) {
                        *d += *x;
                    }
                }
                self.accumulate(grads, *src, ds);
            }
            Op::SegmentMean { x, segments } => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Tensor::zeros(rows, cols);
                for (s, seg) in segments.iter().enumerate() {
                    let inv = T::one() / T::from_usize(seg.len()).unwrap();
                    for &r in seg {
                        for (d, x) in dx.row_mut(r).iter_mut().zip(g.row(s)) {
                            *d += *x * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let (rows, cols) = self.shape(*p);
                    let d = g.data()[start * cols..(start + rows) * cols].to_vec();
                    self.accumulate(grads, *p, Tensor::from_vec(rows, cols, d));
                    start += rows;
                }
            }
            Op::SliceRows { a, start } => {
                let (rows, cols) = self.shape(*a);
                let mut da = Tensor::zeros(rows, cols);
                da.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::filled(rows, cols, g.data()[0]));
            }
            Op::CosineMatrix { a, b, a_norm, b_norm } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let out = &node.value;
                let mut da = Tensor::zeros(va.rows(), va.cols());
                let mut db = Tensor::zeros(vb.rows(), vb.cols());
                for i in 0..va.rows() {
                    for j in 0..vb.rows() {
                        let denom = a_norm[i] * b_norm[j];
                        if denom == T::zero() {
                            continue;
                        }
                        let gij = g.get(i, j);
                        let cij = out.get(i, j);
                        let ca = cij / (a_norm[i] * a_norm[i]);
                        let cb = cij / (b_norm[j] * b_norm[j]);
                        for c in 0..va.cols() {
                            let ai = va.get(i, c);
                            let bj = vb.get(j, c);
                            da.data_mut()[i * va.cols() + c] += gij * (bj / denom - ca * ai);
                            db.data_mut()[j * vb.cols() + c] += gij * (ai / denom - cb * bj);
                        }
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let scale = g.data()[0] / T::from_usize(*count).unwrap();
                let mut dl = Tensor::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for c in 0..probs.cols() {
                        let onehot = if c == t { T::one() } else { T::zero() };
                        dl.set(r, c, (probs.get(r, c) - onehot) * scale);
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
        }
    }
}
