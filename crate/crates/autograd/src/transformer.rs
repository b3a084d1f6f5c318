//! Pre-norm transformer encoder and decoder stacks over packed rows.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionLayout;
use crate::error::NnError;
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParameterStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ff_multiplier: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ff_multiplier: 4,
            max_positions: 64,
            dropout: 0.0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.num_layers == 0 {
            return Err(NnError::Shape("transformer needs at least one layer".into()));
        }
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(NnError::Shape(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.ff_multiplier == 0 || self.max_positions == 0 {
            return Err(NnError::Shape(
                "ff_multiplier and max_positions must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::Shape(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Fixed sinusoidal position encodings, `n × d`.
pub fn sinusoidal_positions<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            t.set(pos, i, T::from_f64_lossy(v));
        }
    }
    t
}

/// Position encodings for packed segments: each segment restarts at
/// `offset`.
pub fn packed_positions<T: Scalar>(lengths: &[usize], offset: usize, d: usize) -> Tensor<T> {
    let max = lengths.iter().copied().max().unwrap_or(0) + offset;
    let table = sinusoidal_positions::<T>(max, d);
    let total: usize = lengths.iter().sum();
    let mut out = Tensor::zeros(total, d);
    let mut row = 0;
    for &len in lengths {
        for p in 0..len {
            out.row_mut(row).copy_from_slice(table.row(p + offset));
            row += 1;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self, NnError> {
        let weight = store.register(&format!("{name}.weight"), fan_in, fan_out, Init::FanIn(fan_in))?;
        let bias = if bias {
            Some(store.register(&format!("{name}.bias"), 1, fan_out, Init::Constant(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, d: usize) -> Result<Self, NnError> {
        Ok(Self {
            gain: store.register(&format!("{name}.gain"), 1, d, Init::Constant(1.0))?,
            bias: store.register(&format!("{name}.bias"), 1, d, Init::Constant(0.0))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, d: usize, heads: usize) -> Result<Self, NnError> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, true)?,
            key: Linear::new(store, &format!("{name}.key"), d, d, true)?,
            value: Linear::new(store, &format!("{name}.value"), d, d, true)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, true)?,
            heads,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        keys: Var,
        layout: &Rc<AttentionLayout>,
    ) -> Var {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, keys);
        let v = self.value.forward(g, keys);
        let a = g.attention(q, k, v, self.heads, Rc::clone(layout));
        self.output.forward(g, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, d: usize, mult: usize) -> Result<Self, NnError> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d, d * mult, true)?,
            down: Linear::new(store, &format!("{name}.down"), d * mult, d, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, dropout: f64) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        let h = g.dropout(h, dropout);
        self.down.forward(g, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

/// Stack of pre-norm self-attention blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: TransformerConfig,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        cfg: &TransformerConfig,
    ) -> Result<Self, NnError> {
        cfg.validate()?;
        let d = cfg.hidden_size;
        let layers = (0..cfg.num_layers)
            .map(|i| {
                let p = format!("{prefix}.layer{i}");
                Ok(EncoderLayer {
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), d)?,
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, cfg.num_heads)?,
                    ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), d)?,
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, cfg.ff_multiplier)?,
                })
            })
            .collect::<Result<_, NnError>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            final_norm: LayerNorm::new(store, &format!("{prefix}.final_norm"), d)?,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// `x` holds already-embedded rows (position encodings included).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        layout: &Rc<AttentionLayout>,
    ) -> Result<Var, NnError> {
        let (rows, cols) = g.shape(x);
        if cols != self.cfg.hidden_size {
            return Err(NnError::Shape(format!(
                "encoder input width {cols} != hidden_size {}",
                self.cfg.hidden_size
            )));
        }
        layout.check(rows, rows).map_err(NnError::Shape)?;
        if let Some(b) = layout.blocks.iter().find(|b| b.queries.len() > self.cfg.max_positions) {
            return Err(NnError::Shape(format!(
                "sequence of length {} exceeds max_positions {}",
                b.queries.len(),
                self.cfg.max_positions
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            let n = layer.attn_norm.forward(g, h);
            let a = layer.attn.forward(g, n, n, layout);
            let a = g.dropout(a, self.cfg.dropout);
            h = g.add(h, a);
            let n = layer.ff_norm.forward(g, h);
            let f = layer.ff.forward(g, n, self.cfg.dropout);
            let f = g.dropout(f, self.cfg.dropout);
            h = g.add(h, f);
        }
        Ok(self.final_norm.forward(g, h))
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

/// Pre-norm decoder: causal self-attention, cross-attention, feed-forward.
#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: TransformerConfig,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
}

impl Decoder {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        cfg: &TransformerConfig,
    ) -> Result<Self, NnError> {
        cfg.validate()?;
        let d = cfg.hidden_size;
        let layers = (0..cfg.num_layers)
            .map(|i| {
                let p = format!("{prefix}.layer{i}");
                Ok(DecoderLayer {
                    self_norm: LayerNorm::new(store, &format!("{p}.self_norm"), d)?,
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, cfg.num_heads)?,
                    cross_norm: LayerNorm::new(store, &format!("{p}.cross_norm"), d)?,
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), d, cfg.num_heads)?,
                    ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), d)?,
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, cfg.ff_multiplier)?,
                })
            })
            .collect::<Result<_, NnError>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            final_norm: LayerNorm::new(store, &format!("{prefix}.final_norm"), d)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        self_layout: &Rc<AttentionLayout>,
        memory: Var,
        cross_layout: &Rc<AttentionLayout>,
    ) -> Result<Var, NnError> {
        let (rows, _) = g.shape(x);
        let (mem_rows, _) = g.shape(memory);
        self_layout.check(rows, rows).map_err(NnError::Shape)?;
        cross_layout.check(rows, mem_rows).map_err(NnError::Shape)?;
        if let Some(b) = self_layout
            .blocks
            .iter()
            .find(|b| b.queries.len() > self.cfg.max_positions)
        {
            return Err(NnError::Shape(format!(
                "prefix of length {} exceeds max_positions {}",
                b.queries.len(),
                self.cfg.max_positions
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            let n = layer.self_norm.forward(g, h);
            let a = layer.self_attn.forward(g, n, n, self_layout);
            let a = g.dropout(a, self.cfg.dropout);
            h = g.add(h, a);
            let n = layer.cross_norm.forward(g, h);
            let c = layer.cross_attn.forward(g, n, memory, cross_layout);
            let c = g.dropout(c, self.cfg.dropout);
            h = g.add(h, c);
            let n = layer.ff_norm.forward(g, h);
            let f = layer.ff.forward(g, n, self.cfg.dropout);
            let f = g.dropout(f, self.cfg.dropout);
            h = g.add(h, f);
        }
        Ok(self.final_norm.forward(g, h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = TransformerConfig {
            hidden_size: 10,
            num_heads: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn packed_positions_restart_per_segment() {
        let p = packed_positions::<f64>(&[2, 3], 0, 4);
        let table = sinusoidal_positions::<f64>(3, 4);
        assert_eq!(p.row(0), table.row(0));
        assert_eq!(p.row(2), table.row(0));
        assert_eq!(p.row(4), table.row(2));
    }
}
