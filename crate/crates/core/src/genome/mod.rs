//! Three-tier gene populations: layers, blocks and models.
//!
//! Layers are primitive ops (convolution or fully connected), blocks are
//! small DAGs of layer references, models are DAGs of block references.
//! All genes live in a [`GenePool`] that assigns monotonically increasing
//! ids, tracks usage counts, and garbage-collects genes no model uses.

mod random;
mod snapshot;
mod spectrum;

pub use random::random_model;
pub use snapshot::PoolSnapshot;
pub use spectrum::{spectrum, Spectrum};

/// Chain-plus-extras wiring, exposed for test-support graph generators.
pub fn random_wiring_for_tests<R: rand::Rng>(
    rng: &mut R,
    len: usize,
    extra: usize,
) -> std::collections::BTreeSet<(usize, usize)> {
    random::random_wiring(rng, len, extra)
}

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Legal kernel sizes for convolution layers.
pub const KERNEL_CHOICES: [usize; 3] = [1, 3, 5];
/// Legal filter counts for convolution layers.
pub const FILTER_CHOICES: [usize; 4] = [8, 16, 32, 64];
/// Legal strides for convolution layers.
pub const STRIDE_CHOICES: [usize; 2] = [1, 2];
/// Legal unit counts for fully connected layers.
pub const UNIT_CHOICES: [usize; 4] = [64, 128, 256, 512];

/// Default cap on the layer population; above it only swap mutations apply.
pub const DEFAULT_LAYER_CAP: usize = 100;
/// Default cap on the block population.
pub const DEFAULT_BLOCK_CAP: usize = 100;

/// Identifier of a gene within a pool. Ids are assigned in insertion order
/// and never reused, so event logs replay unambiguously.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct GeneId(pub u64);

impl std::fmt::Display for GeneId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Layer hyperparameters. Convolution and dense layers carry disjoint
/// parameter sets, so the fields live in the enum payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        kernel: usize,
        filters: usize,
        stride: usize,
    },
    Dense {
        units: usize,
    },
}

impl LayerKind {
    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv { .. })
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, LayerKind::Dense { .. })
    }

    /// True when every hyperparameter is drawn from its legal set.
    pub fn in_legal_sets(&self) -> bool {
        match *self {
            LayerKind::Conv {
                kernel,
                filters,
                stride,
            } => {
                KERNEL_CHOICES.contains(&kernel)
                    && FILTER_CHOICES.contains(&filters)
                    && STRIDE_CHOICES.contains(&stride)
            }
            LayerKind::Dense { units } => UNIT_CHOICES.contains(&units),
        }
    }
}

/// A primitive layer gene: member of the layer population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGene {
    pub id: GeneId,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// A block gene: an ordered list of layer references plus a DAG of directed
/// edges between reference positions. Edges are index pairs, not gene ids,
/// so a block may reference the same layer twice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGene {
    pub id: GeneId,
    pub layer_refs: Vec<GeneId>,
    pub layer_edges: BTreeSet<(usize, usize)>,
}

/// Clean accuracy and adversarial-bank accuracy of an evaluated model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessValue {
    pub accuracy: f64,
    pub robustness: f64,
}

impl FitnessValue {
    pub fn fitness(&self) -> f64 {
        self.accuracy + self.robustness
    }
}

/// A model gene: a DAG of block references. Blocks without incoming edges
/// receive the network input; blocks without outgoing edges feed the
/// softmax head. Those endpoint connections are implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGene {
    pub id: GeneId,
    pub block_refs: Vec<GeneId>,
    pub block_edges: BTreeSet<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fitness: Option<FitnessValue>,
}

/// Population caps. When a population exceeds its cap, the only mutation
/// of that class left available is swap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCaps {
    pub layer_cap: usize,
    pub block_cap: usize,
}

impl Default for PoolCaps {
    fn default() -> Self {
        PoolCaps {
            layer_cap: DEFAULT_LAYER_CAP,
            block_cap: DEFAULT_BLOCK_CAP,
        }
    }
}

/// Violations of genome structure or reference integrity.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenomeError {
    #[error("block {block} references unknown layer {layer}")]
    DanglingLayer { block: GeneId, layer: GeneId },
    #[error("model {model} references unknown block {block}")]
    DanglingBlock { model: GeneId, block: GeneId },
    #[error("unknown model {0}")]
    UnknownModel(GeneId),
    #[error("unknown block {0}")]
    UnknownBlock(GeneId),
    #[error("unknown layer {0}")]
    UnknownLayer(GeneId),
    #[error("gene {id}: edge ({from}, {to}) indexes outside {len} references")]
    EdgeOutOfRange {
        id: GeneId,
        from: usize,
        to: usize,
        len: usize,
    },
    #[error("gene {id}: edges contain a cycle")]
    Cyclic { id: GeneId },
    #[error("gene {id}: reference list is empty")]
    Empty { id: GeneId },
    #[error("layer {id}: hyperparameter outside its legal set")]
    IllegalHyperparameter { id: GeneId },
    #[error("snapshot contains duplicate gene id {0}")]
    DuplicateId(GeneId),
}

/// What a garbage-collection pass removed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcReport {
    pub removed_layers: Vec<GeneId>,
    pub removed_blocks: Vec<GeneId>,
}

impl GcReport {
    pub fn is_empty(&self) -> bool {
        self.removed_layers.is_empty() && self.removed_blocks.is_empty()
    }
}

/// The three gene populations plus id allocation. Single writer; read-only
/// views (spectrum, usage counts, compilation) may run concurrently.
#[derive(Debug, Clone, PartialEq)]
pub struct GenePool {
    layers: BTreeMap<GeneId, LayerGene>,
    blocks: BTreeMap<GeneId, BlockGene>,
    models: BTreeMap<GeneId, ModelGene>,
    caps: PoolCaps,
    next_id: u64,
}

impl Default for GenePool {
    fn default() -> Self {
        Self::new(PoolCaps::default())
    }
}

impl GenePool {
    pub fn new(caps: PoolCaps) -> Self {
        GenePool {
            layers: BTreeMap::new(),
            blocks: BTreeMap::new(),
            models: BTreeMap::new(),
            caps,
            next_id: 0,
        }
    }

    pub fn caps(&self) -> PoolCaps {
        self.caps
    }

    fn fresh_id(&mut self) -> GeneId {
        let id = GeneId(self.next_id);
        self.next_id += 1;
        id
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn model_count(&self) -> usize {
        self.models.len()
    }

    pub fn layer(&self, id: GeneId) -> Result<&LayerGene, GenomeError> {
        self.layers.get(&id).ok_or(GenomeError::UnknownLayer(id))
    }

    pub fn block(&self, id: GeneId) -> Result<&BlockGene, GenomeError> {
        self.blocks.get(&id).ok_or(GenomeError::UnknownBlock(id))
    }

    pub fn model(&self, id: GeneId) -> Result<&ModelGene, GenomeError> {
        self.models.get(&id).ok_or(GenomeError::UnknownModel(id))
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerGene> {
        self.layers.values()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockGene> {
        self.blocks.values()
    }

    pub fn models(&self) -> impl Iterator<Item = &ModelGene> {
        self.models.values()
    }

    pub fn layer_ids(&self) -> Vec<GeneId> {
        self.layers.keys().copied().collect()
    }

    pub fn block_ids(&self) -> Vec<GeneId> {
        self.blocks.keys().copied().collect()
    }

    pub fn model_ids(&self) -> Vec<GeneId> {
        self.models.keys().copied().collect()
    }

    pub fn insert_layer(&mut self, kind: LayerKind) -> GeneId {
        let id = self.fresh_id();
        self.layers.insert(id, LayerGene { id, kind });
        id
    }

    pub fn insert_block(
        &mut self,
        layer_refs: Vec<GeneId>,
        layer_edges: BTreeSet<(usize, usize)>,
    ) -> Result<GeneId, GenomeError> {
        let id = self.fresh_id();
        let block = BlockGene {
            id,
            layer_refs,
            layer_edges,
        };
        self.validate_block(&block)?;
        self.blocks.insert(id, block);
        Ok(id)
    }

    pub fn insert_model(
        &mut self,
        block_refs: Vec<GeneId>,
        block_edges: BTreeSet<(usize, usize)>,
    ) -> Result<GeneId, GenomeError> {
        let id = self.fresh_id();
        let model = ModelGene {
            id,
            block_refs,
            block_edges,
            fitness: None,
        };
        self.validate_model(&model)?;
        self.models.insert(id, model);
        Ok(id)
    }

    pub fn remove_model(&mut self, id: GeneId) -> Option<ModelGene> {
        self.models.remove(&id)
    }

    pub fn set_fitness(&mut self, id: GeneId, value: FitnessValue) -> Result<(), GenomeError> {
        self.models
            .get_mut(&id)
            .ok_or(GenomeError::UnknownModel(id))?
            .fitness = Some(value);
        Ok(())
    }

    /// Number of models using each layer and block. A gene referenced
    /// several times by one model still counts once for that model; layers
    /// count through the blocks the model uses.
    pub fn usage_counts(&self) -> Result<BTreeMap<GeneId, usize>, GenomeError> {
        let mut counts: BTreeMap<GeneId, usize> = BTreeMap::new();
        for id in self.layers.keys().chain(self.blocks.keys()) {
            counts.insert(*id, 0);
        }
        for model in self.models.values() {
            let mut used: BTreeSet<GeneId> = BTreeSet::new();
            for &block_id in &model.block_refs {
                let block = self.blocks.get(&block_id).ok_or(GenomeError::DanglingBlock {
                    model: model.id,
                    block: block_id,
                })?;
                used.insert(block_id);
                for &layer_id in &block.layer_refs {
                    if !self.layers.contains_key(&layer_id) {
                        return Err(GenomeError::DanglingLayer {
                            block: block_id,
                            layer: layer_id,
                        });
                    }
                    used.insert(layer_id);
                }
            }
            for id in used {
                *counts.entry(id).or_insert(0) += 1;
            }
        }
        Ok(counts)
    }

    /// Removes every layer and block no model uses. Models are untouched.
    pub fn garbage_collect(&mut self) -> Result<GcReport, GenomeError> {
        let counts = self.usage_counts()?;
        let mut report = GcReport::default();
        for (&id, &n) in &counts {
            if n > 0 {
                continue;
            }
            if self.blocks.remove(&id).is_some() {
                report.removed_blocks.push(id);
            } else if self.layers.remove(&id).is_some() {
                report.removed_layers.push(id);
            }
        }
        Ok(report)
    }

    fn validate_block(&self, block: &BlockGene) -> Result<(), GenomeError> {
        if block.layer_refs.is_empty() {
            return Err(GenomeError::Empty { id: block.id });
        }
        for &layer_id in &block.layer_refs {
            if !self.layers.contains_key(&layer_id) {
                return Err(GenomeError::DanglingLayer {
                    block: block.id,
                    layer: layer_id,
                });
            }
        }
        validate_dag(block.id, block.layer_refs.len(), &block.layer_edges)
    }

    fn validate_model(&self, model: &ModelGene) -> Result<(), GenomeError> {
        if model.block_refs.is_empty() {
            return Err(GenomeError::Empty { id: model.id });
        }
        for &block_id in &model.block_refs {
            if !self.blocks.contains_key(&block_id) {
                return Err(GenomeError::DanglingBlock {
                    model: model.id,
                    block: block_id,
                });
            }
        }
        validate_dag(model.id, model.block_refs.len(), &model.block_edges)
    }

    /// Full integrity check over every gene in the pool.
    pub fn validate(&self) -> Result<(), GenomeError> {
        for layer in self.layers.values() {
            if !layer.kind.in_legal_sets() {
                return Err(GenomeError::IllegalHyperparameter { id: layer.id });
            }
        }
        for block in self.blocks.values() {
            self.validate_block(block)?;
        }
        for model in self.models.values() {
            self.validate_model(model)?;
        }
        Ok(())
    }
}

/// Checks edge ranges and acyclicity for an index-pair edge set.
/// The entry/exit invariant (at least one node without incoming edges and
/// one without outgoing) is implied: a nonempty DAG always has both.
pub(crate) fn validate_dag(
    id: GeneId,
    len: usize,
    edges: &BTreeSet<(usize, usize)>,
) -> Result<(), GenomeError> {
    for &(from, to) in edges {
        if from >= len || to >= len || from == to {
            return Err(GenomeError::EdgeOutOfRange { id, from, to, len });
        }
    }
    if topo_order(len, edges).is_none() {
        return Err(GenomeError::Cyclic { id });
    }
    Ok(())
}

/// Kahn topological sort; ties broken by smallest index so the order is
/// deterministic. Returns `None` if the edges contain a cycle.
pub fn topo_order(len: usize, edges: &BTreeSet<(usize, usize)>) -> Option<Vec<usize>> {
    let mut indegree = vec![0usize; len];
    for &(_, to) in edges {
        indegree[to] += 1;
    }
    let mut ready: BTreeSet<usize> = (0..len).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(len);
    while let Some(&node) = ready.iter().next() {
        ready.remove(&node);
        order.push(node);
        for &(from, to) in edges {
            if from == node {
                indegree[to] -= 1;
                if indegree[to] == 0 {
                    ready.insert(to);
                }
            }
        }
    }
    (order.len() == len).then_some(order)
}

/// True if a directed path runs from `from` to `to`.
pub fn has_path(len: usize, edges: &BTreeSet<(usize, usize)>, from: usize, to: usize) -> bool {
    if from == to {
        return true;
    }
    let mut seen = vec![false; len];
    let mut stack = vec![from];
    while let Some(node) = stack.pop() {
        for &(a, b) in edges {
            if a == node && !seen[b] {
                if b == to {
                    return true;
                }
                seen[b] = true;
                stack.push(b);
            }
        }
    }
    false
}

/// Indices with no incoming edge (block input / network input attaches here).
pub fn entry_indices(len: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<usize> {
    let mut has_in = vec![false; len];
    for &(_, to) in edges {
        has_in[to] = true;
    }
    (0..len).filter(|&i| !has_in[i]).collect()
}

/// Indices with no outgoing edge (their output leaves the block / model).
pub fn exit_indices(len: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<usize> {
    let mut has_out = vec![false; len];
    for &(from, _) in edges {
        has_out[from] = true;
    }
    (0..len).filter(|&i| !has_out[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn conv(kernel: usize, filters: usize, stride: usize) -> LayerKind {
        LayerKind::Conv {
            kernel,
            filters,
            stride,
        }
    }

    fn single_layer_block(pool: &mut GenePool, kind: LayerKind) -> GeneId {
        let l = pool.insert_layer(kind);
        pool.insert_block(vec![l], BTreeSet::new()).unwrap()
    }

    #[test]
    fn usage_counts_once_per_model() {
        let mut pool = GenePool::default();
        let b = single_layer_block(&mut pool, conv(3, 16, 1));
        // one model using block b twice
        let m = pool
            .insert_model(vec![b, b], [(0, 1)].into_iter().collect())
            .unwrap();
        let counts = pool.usage_counts().unwrap();
        assert_eq!(counts[&b], 1);
        assert_eq!(counts[&pool.block(b).unwrap().layer_refs[0]], 1);
        assert!(pool.model(m).is_ok());
    }

    #[test]
    fn usage_counts_empty_model_population() {
        let mut pool = GenePool::default();
        let b = single_layer_block(&mut pool, conv(3, 16, 1));
        let counts = pool.usage_counts().unwrap();
        assert_eq!(counts[&b], 0);
        assert!(counts.values().all(|&n| n == 0));
    }

    #[test]
    fn usage_counts_shared_block() {
        let mut pool = GenePool::default();
        let b = single_layer_block(&mut pool, LayerKind::Dense { units: 64 });
        for _ in 0..3 {
            pool.insert_model(vec![b], BTreeSet::new()).unwrap();
        }
        assert_eq!(pool.usage_counts().unwrap()[&b], 3);
    }

    #[test]
    fn gc_removes_unused_block_and_its_layers() {
        let mut pool = GenePool::default();
        let l1 = pool.insert_layer(conv(3, 16, 1));
        let l2 = pool.insert_layer(LayerKind::Dense { units: 64 });
        let unused = pool
            .insert_block(vec![l1, l2], [(0, 1)].into_iter().collect())
            .unwrap();
        let kept = single_layer_block(&mut pool, conv(1, 8, 1));
        pool.insert_model(vec![kept], BTreeSet::new()).unwrap();

        let report = pool.garbage_collect().unwrap();
        assert_eq!(report.removed_blocks, vec![unused]);
        assert_eq!(report.removed_layers, vec![l1, l2]);
        assert!(pool.block(kept).is_ok());
    }

    #[test]
    fn gc_identity_when_everything_used() {
        let mut pool = GenePool::default();
        let b = single_layer_block(&mut pool, conv(5, 32, 2));
        pool.insert_model(vec![b], BTreeSet::new()).unwrap();
        let before = pool.clone();
        let report = pool.garbage_collect().unwrap();
        assert!(report.is_empty());
        assert_eq!(pool, before);
    }

    #[test]
    fn ids_are_monotonic_and_never_reused() {
        let mut pool = GenePool::default();
        let a = pool.insert_layer(conv(3, 8, 1));
        let b = pool.insert_layer(conv(3, 8, 1));
        assert!(b > a);
        // removal does not free the id
        let blk = pool.insert_block(vec![a], BTreeSet::new()).unwrap();
        let m = pool.insert_model(vec![blk], BTreeSet::new()).unwrap();
        pool.remove_model(m);
        let c = pool.insert_layer(conv(3, 8, 1));
        assert!(c > m);
    }

    #[test]
    fn cyclic_block_rejected() {
        let mut pool = GenePool::default();
        let l1 = pool.insert_layer(conv(3, 8, 1));
        let l2 = pool.insert_layer(conv(3, 8, 1));
        let err = pool
            .insert_block(vec![l1, l2], [(0, 1), (1, 0)].into_iter().collect())
            .unwrap_err();
        assert!(matches!(err, GenomeError::Cyclic { .. }));
    }

    #[test]
    fn dangling_layer_rejected() {
        let mut pool = GenePool::default();
        let err = pool
            .insert_block(vec![GeneId(999)], BTreeSet::new())
            .unwrap_err();
        assert!(matches!(err, GenomeError::DanglingLayer { .. }));
    }

    #[test]
    fn entry_exit_indices() {
        let edges: BTreeSet<_> = [(0, 1), (0, 2), (1, 3), (2, 3)].into_iter().collect();
        assert_eq!(entry_indices(4, &edges), vec![0]);
        assert_eq!(exit_indices(4, &edges), vec![3]);
        assert_eq!(topo_order(4, &edges), Some(vec![0, 1, 2, 3]));
        assert!(has_path(4, &edges, 0, 3));
        assert!(!has_path(4, &edges, 3, 0));
    }
}
