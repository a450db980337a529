//! Bridging named parameter stores and tape graphs.

use crate::checkpoint::{Param, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Graph, TensorId};
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// Inserts a normal(0, std) initialized parameter. The RNG stream is
/// derived from (seed, key), so initialization is independent of insertion
/// order.
pub fn insert_normal(store: &mut ParamStore, key: &str, shape: Vec<usize>, std: f64, seed: u64) {
    let mut rng = crate::rng::stream(seed, key);
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    store.insert(key.to_string(), Param::new(shape, data));
}

pub fn insert_const(store: &mut ParamStore, key: &str, shape: Vec<usize>, value: f64) {
    let n: usize = shape.iter().product();
    store.insert(key.to_string(), Param::new(shape, vec![value; n]));
}

/// Replaces every non-layer-norm weight with normal(0, std) draws. Used by
/// gradient checks: zero-initialized projections would otherwise leave
/// whole paths without gradient flow, and tiny weights push gradients into
/// the finite-difference noise floor.
pub fn randomize_for_check(store: &mut ParamStore, std: f64, seed: u64) {
    let dist = Normal::new(0.0, std).expect("valid std");
    for (key, param) in store.iter_mut() {
        if key.contains(".ln") || key.contains("ln_f") {
            continue;
        }
        let mut rng = crate::rng::stream(seed, key);
        param.data.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
    }
}

/// Parameter tensors bound into a graph as leaves, addressable by name.
pub struct BoundParams {
    ids: BTreeMap<String, TensorId>,
}

impl BoundParams {
    /// Inserts every parameter as a leaf; `trainable` decides which leaves
    /// receive gradients.
    pub fn bind<F: Fn(&str) -> bool>(
        g: &mut Graph,
        store: &ParamStore,
        trainable: F,
    ) -> Result<Self> {
        let mut ids = BTreeMap::new();
        for (key, param) in store {
            let id = g.leaf(param.shape.clone(), param.data.clone(), trainable(key))?;
            ids.insert(key.clone(), id);
        }
        Ok(Self { ids })
    }

    /// Wraps an existing name -> node mapping (used by gradient checks that
    /// bind leaves themselves).
    pub fn from_ids(ids: BTreeMap<String, TensorId>) -> Self {
        Self { ids }
    }

    pub fn get(&self, key: &str) -> Result<TensorId> {
        self.ids
            .get(key)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter {key}")))
    }

    pub fn ids(&self) -> &BTreeMap<String, TensorId> {
        &self.ids
    }

    /// Gradients of every trainable parameter, keyed by name.
    pub fn collect_grads(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.ids
            .iter()
            .filter_map(|(key, &id)| g.grad(id).map(|gr| (key.clone(), gr.to_vec())))
            .collect()
    }
}
