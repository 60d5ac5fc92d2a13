//! Named parameter tensors shared by both model families.

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, NodeId, Result as TensorResult};
use crate::text::sample_normal;

/// A raw parameter tensor outside any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: Vec<usize>) -> Param {
        let n = shape.iter().product();
        Param { shape, values: vec![0.0; n] }
    }

    pub fn ones(shape: Vec<usize>) -> Param {
        let n = shape.iter().product();
        Param { shape, values: vec![1.0; n] }
    }

    /// Normal init scaled by 1/sqrt(fan_in).
    pub fn randn(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Param {
        let n: usize = shape.iter().product();
        let scale = 1.0 / (fan_in.max(1) as f32).sqrt();
        let values = (0..n).map(|_| scale * sample_normal(rng)).collect();
        Param { shape, values }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Insertion-ordered so that iteration (checkpointing, optimizer state,
/// gradient clipping) is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        let name = name.into();
        let previous = self.entries.insert(name.clone(), param);
        assert!(previous.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Param {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(Param::numel).sum()
    }

    /// Insert every parameter into `graph` as a leaf and return the
    /// name-to-node binding. `trainable` controls whether gradients will
    /// flow (generation binds read-only).
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> TensorResult<BoundParams> {
        let mut ids = IndexMap::with_capacity(self.entries.len());
        for (name, param) in &self.entries {
            let id = graph.leaf(param.values.clone(), param.shape.clone(), trainable)?;
            ids.insert(name.clone(), id);
        }
        Ok(BoundParams { ids })
    }
}

/// Node ids of one [`ParamSet`] bound into a graph.
pub struct BoundParams {
    ids: IndexMap<String, NodeId>,
}

impl BoundParams {
    /// Assemble a binding from externally created leaves (gradient-check
    /// harnesses bind their own inputs).
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, NodeId)>) -> BoundParams {
        BoundParams { ids: pairs.into_iter().collect() }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, NodeId)> {
        self.ids.iter().map(|(n, &id)| (n, id))
    }
}
