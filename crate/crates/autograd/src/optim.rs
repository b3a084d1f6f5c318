use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient norm to at most this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; parameters were left untouched.
    SkippedNonFinite,
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    frozen: Vec<bool>,
    steps: u64,
    skipped: usize,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParameterStore<T>) -> Self {
        let zeros = |id: ParamId| {
            let v = store.value(id);
            Tensor::zeros(v.rows(), v.cols())
        };
        Self {
            cfg,
            first: store.ids().map(zeros).collect(),
            second: store.ids().map(zeros).collect(),
            frozen: vec![false; store.len()],
            steps: 0,
            skipped: 0,
        }
    }

    /// Parameters for which `pred(name)` holds are never updated.
    pub fn freeze_where(&mut self, store: &ParameterStore<T>, pred: impl Fn(&str) -> bool) {
        for id in store.ids() {
            if pred(store.name(id)) {
                self.frozen[id.index()] = true;
            }
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Applies one update from the gradients currently held by `store`.
    pub fn step(&mut self, store: &mut ParameterStore<T>) -> StepOutcome {
        let finite = store
            .ids()
            .filter(|id| !self.frozen[id.index()])
            .all(|id| store.grad(id).all_finite());
        if !finite {
            self.skipped += 1;
            log::warn!("non-finite gradient; optimizer step skipped ({} so far)", self.skipped);
            return StepOutcome::SkippedNonFinite;
        }
        let norm = store
            .ids()
            .filter(|id| !self.frozen[id.index()])
            .map(|id| store.grad(id).sum_squares())
            .sum::<f64>()
            .sqrt();
        let clip = match self.cfg.clip_norm {
            Some(max) if norm > max && norm > 0.0 => max / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as f64;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powf(t);
        let c2 = 1.0 - b2.powf(t);
        let lr = self.cfg.learning_rate;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            if self.frozen[i] {
                continue;
            }
            let grad = store.grad(id).data().to_vec();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = grad[j].as_f64() * clip;
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
                m[j] = T::from_f64_lossy(mj);
                v[j] = T::from_f64_lossy(vj);
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + self.cfg.eps);
                p[j] = T::from_f64_lossy(p[j].as_f64() - update);
            }
        }
        StepOutcome::Applied
    }
}
