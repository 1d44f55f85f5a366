use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Keys and values of one layer, each `[n_heads × t × d_head]`.
#[derive(Clone, Copy, Debug)]
pub struct LayerKv {
    pub key: Var,
    pub value: Var,
}

/// Per-layer key/value states of already-processed positions.
///
/// This is the only channel through which prompts reach a frozen backbone:
/// every prompt strategy ultimately produces either input embeddings or a
/// `PastState`.
#[derive(Clone, Debug, Default)]
pub struct PastState {
    layers: Vec<LayerKv>,
    t_past: usize,
}

impl PastState {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Validates that every layer holds the same number of positions.
    pub fn new(graph: &Graph, layers: Vec<LayerKv>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Ok(Self::empty());
        };
        let t_past = graph.shape(first.key)[1];
        for (l, kv) in layers.iter().enumerate() {
            let (ks, vs) = (graph.shape(kv.key), graph.shape(kv.value));
            if ks.len() != 3 || ks != vs || ks[1] != t_past {
                return Err(Error::Config(format!(
                    "past layer {l} has key {ks:?} / value {vs:?}, expected {t_past} positions"
                )));
            }
        }
        Ok(Self { layers, t_past })
    }

    pub fn t_past(&self) -> usize {
        self.t_past
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[LayerKv] {
        &self.layers
    }

    /// Snapshot of every layer's `(key, value)` tensors.
    pub fn tensors(&self, graph: &Graph) -> Vec<(Tensor, Tensor)> {
        self.layers
            .iter()
            .map(|kv| (graph.value(kv.key).clone(), graph.value(kv.value).clone()))
            .collect()
    }

    /// Re-inserts concrete tensors as constants in `graph`.
    pub fn from_tensors(graph: &mut Graph, layers: &[(Tensor, Tensor)]) -> Result<Self> {
        let kvs = layers
            .iter()
            .map(|(k, v)| LayerKv {
                key: graph.constant(k.clone()),
                value: graph.constant(v.clone()),
            })
            .collect();
        Self::new(graph, kvs)
    }
}
