//! Central finite-difference checks of tape gradients, run in `f64`.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParameterStore};

#[derive(Clone, Debug)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero coordinates
/// from dividing by noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-3;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn eval<F>(store: &ParameterStore<f64>, f: &F) -> f64
where
    F: Fn(&mut Graph<'_, f64>) -> Var,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g);
    g.value(loss).data()[0]
}

/// Compares analytic gradients of `f` with central differences at `probes`
/// uniformly chosen coordinates of the parameters accepted by `select`.
pub fn check_gradients<F, R>(
    store: &mut ParameterStore<f64>,
    f: F,
    probes: usize,
    step: f64,
    select: impl Fn(&str) -> bool,
    rng: &mut R,
) -> GradCheckReport
where
    F: Fn(&mut Graph<'_, f64>) -> Var,
    R: Rng,
{
    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        let grads = g.backward(loss).expect("loss recorded").param_grads();
        grads.into_iter().map(|(id, t)| (id, t.into_data())).collect()
    };
    let candidates: Vec<ParamId> = store.ids().filter(|id| select(store.name(*id))).collect();
    assert!(!candidates.is_empty(), "no parameters selected for gradient check");

    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let id = candidates[rng.gen_range(0..candidates.len())];
        let index = rng.gen_range(0..store.value(id).len());
        let a = analytic.iter().find(|(p, _)| *p == id).map_or(0.0, |(_, g)| g[index]);
        let orig = store.value(id).data()[index];
        store.value_mut(id).data_mut()[index] = orig + step;
        let plus = eval(store, &f);
        store.value_mut(id).data_mut()[index] = orig - step;
        let minus = eval(store, &f);
        store.value_mut(id).data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        out.push(Probe {
            param: store.name(id).to_string(),
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    GradCheckReport { probes: out }
}
