use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::NnError;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly registered parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Constant(f64),
}

/// Named parameter tensors with gradient buffers.
///
/// Each parameter is drawn from its own generator seeded by the store seed
/// and the parameter name, so a parameter's initial value does not depend on
/// which other parameters were registered before it.
#[derive(Clone, Debug)]
pub struct ParameterStore<T> {
    seed: u64,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    index: BTreeMap<String, ParamId>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a, stable across platforms and runs.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId, NnError> {
        if rows == 0 || cols == 0 {
            return Err(NnError::Shape(format!(
                "parameter {name} has empty shape {rows}x{cols}"
            )));
        }
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let value = match init {
            Init::Constant(v) => Tensor::filled(rows, cols, T::from_f64_lossy(v)),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
                let data = (0..rows * cols)
                    .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                    .collect();
                Tensor::from_vec(rows, cols, data)
            }
        };
        Ok(self.insert(name, value))
    }

    fn insert(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    pub fn accumulate_grads(&mut self, grads: Vec<(ParamId, Tensor<T>)>) {
        for (id, g) in grads {
            self.grads[id.0].add_assign(&g);
        }
    }

    /// Replace the value of a named parameter. Shapes must agree.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<(), NnError> {
        let id = self.id(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(NnError::Shape(format!(
                "parameter {name}: stored {:?}, assigned {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// The same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            seed: self.seed,
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }
}
