//! The thirteen mutation operators and the five-mutation child builder.
//!
//! Mutations never edit a gene in place. A layer edit clones the layer and
//! its enclosing block; a block edit clones the block; every mutation adds
//! a new model to the population and leaves the parent (and everything it
//! references) untouched. Cloned genes are new population members, which
//! is what grows the layer and block populations over a run.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genome::{
    has_path, GeneId, GenePool, GenomeError, LayerKind, FILTER_CHOICES, KERNEL_CHOICES,
    UNIT_CHOICES,
};

/// Number of stacked mutations applied when building a child.
pub const MUTATIONS_PER_CHILD: usize = 5;
/// Retries per mutation slot before giving up on a degenerate pool.
pub const MUTATION_RETRIES: usize = 20;

/// The mutation operators, split into layer, block and model classes.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum MutationKind {
    ChangeKernel,
    ChangeFilter,
    ChangeUnits,
    SwapLayer,
    AddLayer,
    RemoveLayer,
    AddLayerConn,
    RemoveLayerConn,
    SwapBlock,
    AddBlock,
    RemoveBlock,
    AddBlockConn,
    RemoveBlockConn,
}

impl MutationKind {
    pub const ALL: [MutationKind; 13] = [
        MutationKind::ChangeKernel,
        MutationKind::ChangeFilter,
        MutationKind::ChangeUnits,
        MutationKind::SwapLayer,
        MutationKind::AddLayer,
        MutationKind::RemoveLayer,
        MutationKind::AddLayerConn,
        MutationKind::RemoveLayerConn,
        MutationKind::SwapBlock,
        MutationKind::AddBlock,
        MutationKind::RemoveBlock,
        MutationKind::AddBlockConn,
        MutationKind::RemoveBlockConn,
    ];

    /// Layer mutations are disabled (except swap) above the layer cap.
    pub fn is_layer_mutation(&self) -> bool {
        matches!(
            self,
            MutationKind::ChangeKernel
                | MutationKind::ChangeFilter
                | MutationKind::ChangeUnits
                | MutationKind::SwapLayer
        )
    }

    /// Block mutations are disabled (except swap) above the block cap.
    pub fn is_block_mutation(&self) -> bool {
        matches!(
            self,
            MutationKind::AddLayer
                | MutationKind::RemoveLayer
                | MutationKind::AddLayerConn
                | MutationKind::RemoveLayerConn
                | MutationKind::SwapBlock
        )
    }
}

/// Provenance of one applied mutation, appended to the run event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationRecord {
    pub kind: MutationKind,
    pub parent_model: GeneId,
    pub child_model: GeneId,
    pub created_genes: Vec<GeneId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MutationError {
    /// The kind cannot apply to this model under the current pool state;
    /// the caller retries with a different kind.
    #[error("mutation {0:?} is not applicable to this model")]
    NotApplicable(MutationKind),
    /// No mutation was applicable within the retry budget.
    #[error("no applicable mutation after {MUTATION_RETRIES} retries per slot")]
    Exhausted,
    #[error(transparent)]
    Genome(#[from] GenomeError),
}

/// Directed edges that can be added to the DAG without creating a cycle.
fn addable_edges(len: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for from in 0..len {
        for to in 0..len {
            if from == to || edges.contains(&(from, to)) {
                continue;
            }
            if !has_path(len, edges, to, from) {
                out.push((from, to));
            }
        }
    }
    out
}

/// Removes index `k`, reconnecting every predecessor to every successor,
/// then remaps the indices above `k`.
fn splice_out(edges: &BTreeSet<(usize, usize)>, k: usize) -> BTreeSet<(usize, usize)> {
    let preds: Vec<usize> = edges.iter().filter(|&&(_, t)| t == k).map(|&(f, _)| f).collect();
    let succs: Vec<usize> = edges.iter().filter(|&&(f, _)| f == k).map(|&(_, t)| t).collect();
    let mut spliced: BTreeSet<(usize, usize)> = edges
        .iter()
        .filter(|&&(f, t)| f != k && t != k)
        .copied()
        .collect();
    for &p in &preds {
        for &s in &succs {
            if p != s {
                spliced.insert((p, s));
            }
        }
    }
    let shift = |i: usize| if i > k { i - 1 } else { i };
    spliced.into_iter().map(|(f, t)| (shift(f), shift(t))).collect()
}

/// All (block position, layer position) pairs in the model whose layer
/// matches the predicate.
fn layer_positions(
    pool: &GenePool,
    model_id: GeneId,
    pred: impl Fn(&LayerKind) -> bool,
) -> Result<Vec<(usize, usize)>, GenomeError> {
    let model = pool.model(model_id)?;
    let mut out = Vec::new();
    for (bpos, &block_id) in model.block_refs.iter().enumerate() {
        let block = pool.block(block_id)?;
        for (lpos, &layer_id) in block.layer_refs.iter().enumerate() {
            if pred(&pool.layer(layer_id)?.kind) {
                out.push((bpos, lpos));
            }
        }
    }
    Ok(out)
}

fn choose<'a, T, R: Rng>(rng: &mut R, items: &'a [T]) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

fn choose_other<R: Rng>(rng: &mut R, choices: &[usize], current: usize) -> usize {
    let others: Vec<usize> = choices.iter().copied().filter(|&v| v != current).collect();
    *choose(rng, &others)
}

struct Ctx {
    created: Vec<GeneId>,
}

impl Ctx {
    /// Clones the block at `bpos`, applies `edit` to the clone, inserts it
    /// and re-points the child's reference at that position.
    fn clone_block_at<R: Rng>(
        &mut self,
        pool: &mut GenePool,
        block_refs: &mut [GeneId],
        bpos: usize,
        _rng: &mut R,
        edit: impl FnOnce(&mut Vec<GeneId>, &mut BTreeSet<(usize, usize)>),
    ) -> Result<(), GenomeError> {
        let block = pool.block(block_refs[bpos])?;
        let mut refs = block.layer_refs.clone();
        let mut edges = block.layer_edges.clone();
        edit(&mut refs, &mut edges);
        let new_block = pool.insert_block(refs, edges)?;
        self.created.push(new_block);
        block_refs[bpos] = new_block;
        Ok(())
    }
}

/// Applies one mutation, adding a new model (and any cloned genes) to the
/// pool. The parent model and every gene it references are unmodified.
pub fn apply_mutation<R: Rng>(
    pool: &mut GenePool,
    model_id: GeneId,
    kind: MutationKind,
    rng: &mut R,
) -> Result<MutationRecord, MutationError> {
    let parent = pool.model(model_id)?.clone();
    let mut block_refs = parent.block_refs.clone();
    let mut block_edges = parent.block_edges.clone();
    let mut ctx = Ctx { created: Vec::new() };
    let not_applicable = || MutationError::NotApplicable(kind);

    match kind {
        MutationKind::ChangeKernel | MutationKind::ChangeFilter => {
            let positions = layer_positions(pool, model_id, LayerKind::is_conv)?;
            if positions.is_empty() {
                return Err(not_applicable());
            }
            let &(bpos, lpos) = choose(rng, &positions);
            let layer_id = pool.block(block_refs[bpos])?.layer_refs[lpos];
            let LayerKind::Conv {
                kernel,
                filters,
                stride,
            } = pool.layer(layer_id)?.kind
            else {
                unreachable!("position filtered to conv");
            };
            let new_kind = match kind {
                MutationKind::ChangeKernel => LayerKind::Conv {
                    kernel: choose_other(rng, &KERNEL_CHOICES, kernel),
                    filters,
                    stride,
                },
                _ => LayerKind::Conv {
                    kernel,
                    filters: choose_other(rng, &FILTER_CHOICES, filters),
                    stride,
                },
            };
            let new_layer = pool.insert_layer(new_kind);
            ctx.created.push(new_layer);
            ctx.clone_block_at(pool, &mut block_refs, bpos, rng, |refs, _| {
                refs[lpos] = new_layer;
            })?;
        }
        MutationKind::ChangeUnits => {
            let positions = layer_positions(pool, model_id, LayerKind::is_dense)?;
            if positions.is_empty() {
                return Err(not_applicable());
            }
            let &(bpos, lpos) = choose(rng, &positions);
            let layer_id = pool.block(block_refs[bpos])?.layer_refs[lpos];
            let LayerKind::Dense { units } = pool.layer(layer_id)?.kind else {
                unreachable!("position filtered to dense");
            };
            let new_layer = pool.insert_layer(LayerKind::Dense {
                units: choose_other(rng, &UNIT_CHOICES, units),
            });
            ctx.created.push(new_layer);
            ctx.clone_block_at(pool, &mut block_refs, bpos, rng, |refs, _| {
                refs[lpos] = new_layer;
            })?;
        }
        MutationKind::SwapLayer => {
            let positions = layer_positions(pool, model_id, |_| true)?;
            if positions.is_empty() {
                return Err(not_applicable());
            }
            let &(bpos, lpos) = choose(rng, &positions);
            let swap_in = *choose(rng, &pool.layer_ids());
            ctx.clone_block_at(pool, &mut block_refs, bpos, rng, |refs, _| {
                refs[lpos] = swap_in;
            })?;
        }
        MutationKind::AddLayer => {
            let bpos = rng.gen_range(0..block_refs.len());
            let new_ref = *choose(rng, &pool.layer_ids());
            let old_len = pool.block(block_refs[bpos])?.layer_refs.len();
            let src = rng.gen_range(0..old_len);
            ctx.clone_block_at(pool, &mut block_refs, bpos, rng, |refs, edges| {
                refs.push(new_ref);
                edges.insert((src, old_len));
            })?;
        }
        MutationKind::RemoveLayer => {
            let mut positions = layer_positions(pool, model_id, |_| true)?;
            let removable: Vec<usize> = (0..block_refs.len())
                .filter(|&bpos| {
                    pool.block(block_refs[bpos])
                        .map(|b| b.layer_refs.len() >= 2)
                        .unwrap_or(false)
                })
                .collect();
            positions.retain(|&(bpos, _)| removable.contains(&bpos));
            if positions.is_empty() {
                return Err(not_applicable());
            }
            let &(bpos, lpos) = choose(rng, &positions);
            ctx.clone_block_at(pool, &mut block_refs, bpos, rng, |refs, edges| {
                *edges = splice_out(edges, lpos);
                refs.remove(lpos);
            })?;
        }
        MutationKind::AddLayerConn => {
            let mut eligible = Vec::new();
            for (bpos, &block_id) in block_refs.iter().enumerate() {
                let block = pool.block(block_id)?;
                let cands = addable_edges(block.layer_refs.len(), &block.layer_edges);
                if !cands.is_empty() {
                    eligible.push((bpos, cands));
                }
            }
            if eligible.is_empty() {
                return Err(not_applicable());
            }
            let (bpos, cands) = choose(rng, &eligible).clone();
            let edge = *choose(rng, &cands);
            ctx.clone_block_at(pool, &mut block_refs, bpos, rng, |_, edges| {
                edges.insert(edge);
            })?;
        }
        MutationKind::RemoveLayerConn => {
            let eligible: Vec<usize> = (0..block_refs.len())
                .filter(|&bpos| {
                    pool.block(block_refs[bpos])
                        .map(|b| !b.layer_edges.is_empty())
                        .unwrap_or(false)
                })
                .collect();
            if eligible.is_empty() {
                return Err(not_applicable());
            }
            let bpos = *choose(rng, &eligible);
            let edges_vec: Vec<(usize, usize)> =
                pool.block(block_refs[bpos])?.layer_edges.iter().copied().collect();
            let edge = *choose(rng, &edges_vec);
            ctx.clone_block_at(pool, &mut block_refs, bpos, rng, |_, edges| {
                edges.remove(&edge);
            })?;
        }
        MutationKind::SwapBlock => {
            let bpos = rng.gen_range(0..block_refs.len());
            block_refs[bpos] = *choose(rng, &pool.block_ids());
        }
        MutationKind::AddBlock => {
            let new_ref = *choose(rng, &pool.block_ids());
            let src = rng.gen_range(0..block_refs.len());
            block_edges.insert((src, block_refs.len()));
            block_refs.push(new_ref);
        }
        MutationKind::RemoveBlock => {
            if block_refs.len() < 2 {
                return Err(not_applicable());
            }
            let bpos = rng.gen_range(0..block_refs.len());
            block_edges = splice_out(&block_edges, bpos);
            block_refs.remove(bpos);
        }
        MutationKind::AddBlockConn => {
            let cands = addable_edges(block_refs.len(), &block_edges);
            if cands.is_empty() {
                return Err(not_applicable());
            }
            block_edges.insert(*choose(rng, &cands));
        }
        MutationKind::RemoveBlockConn => {
            if block_edges.is_empty() {
                return Err(not_applicable());
            }
            let edges_vec: Vec<(usize, usize)> = block_edges.iter().copied().collect();
            block_edges.remove(choose(rng, &edges_vec));
        }
    }

    let child = pool.insert_model(block_refs, block_edges)?;
    ctx.created.push(child);
    Ok(MutationRecord {
        kind,
        parent_model: model_id,
        child_model: child,
        created_genes: ctx.created,
    })
}

/// Mutation kinds applicable to this model under the current pool state.
/// Above the layer (block) cap the layer (block) class reduces to swap;
/// model mutations are unaffected by caps.
pub fn legal_mutations(
    pool: &GenePool,
    model_id: GeneId,
) -> Result<BTreeSet<MutationKind>, GenomeError> {
    let model = pool.model(model_id)?;
    let caps = pool.caps();
    let mut set = BTreeSet::new();

    let layer_swap_only = pool.layer_count() > caps.layer_cap;
    if !layer_swap_only {
        if !layer_positions(pool, model_id, LayerKind::is_conv)?.is_empty() {
            set.insert(MutationKind::ChangeKernel);
            set.insert(MutationKind::ChangeFilter);
        }
        if !layer_positions(pool, model_id, LayerKind::is_dense)?.is_empty() {
            set.insert(MutationKind::ChangeUnits);
        }
    }
    set.insert(MutationKind::SwapLayer);

    let block_swap_only = pool.block_count() > caps.block_cap;
    if !block_swap_only {
        set.insert(MutationKind::AddLayer);
        let mut any_removable = false;
        let mut any_addable_conn = false;
        let mut any_conn = false;
        for &block_id in &model.block_refs {
            let block = pool.block(block_id)?;
            let n = block.layer_refs.len();
            any_removable |= n >= 2;
            any_conn |= !block.layer_edges.is_empty();
            any_addable_conn |= block.layer_edges.len() < n * (n - 1) / 2
                || !addable_edges(n, &block.layer_edges).is_empty();
        }
        if any_removable {
            set.insert(MutationKind::RemoveLayer);
        }
        if any_addable_conn {
            set.insert(MutationKind::AddLayerConn);
        }
        if any_conn {
            set.insert(MutationKind::RemoveLayerConn);
        }
    }
    set.insert(MutationKind::SwapBlock);

    set.insert(MutationKind::AddBlock);
    if model.block_refs.len() >= 2 {
        set.insert(MutationKind::RemoveBlock);
    }
    if !addable_edges(model.block_refs.len(), &model.block_edges).is_empty() {
        set.insert(MutationKind::AddBlockConn);
    }
    if !model.block_edges.is_empty() {
        set.insert(MutationKind::RemoveBlockConn);
    }
    Ok(set)
}

/// Builds a child by stacking five successful mutations, drawing each kind
/// uniformly from the legal set at that step. Intermediate models are
/// removed from the population; only the final child persists. Returns the
/// child id and the applied mutation records.
pub fn make_child<R: Rng>(
    pool: &mut GenePool,
    parent: GeneId,
    rng: &mut R,
) -> Result<(GeneId, Vec<MutationRecord>), MutationError> {
    let mut current = parent;
    let mut records: Vec<MutationRecord> = Vec::with_capacity(MUTATIONS_PER_CHILD);
    for _ in 0..MUTATIONS_PER_CHILD {
        let mut applied = false;
        for _ in 0..MUTATION_RETRIES {
            let legal: Vec<MutationKind> =
                legal_mutations(pool, current)?.into_iter().collect();
            if legal.is_empty() {
                break;
            }
            let kind = *choose(rng, &legal);
            match apply_mutation(pool, current, kind, rng) {
                Ok(record) => {
                    if current != parent {
                        pool.remove_model(current);
                    }
                    current = record.child_model;
                    records.push(record);
                    applied = true;
                    break;
                }
                Err(MutationError::NotApplicable(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        if !applied {
            if current != parent {
                pool.remove_model(current);
            }
            return Err(MutationError::Exhausted);
        }
    }
    Ok((current, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{random_model, spectrum, GenePool, PoolCaps};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seeded_pool(seed: u64, models: usize) -> (GenePool, Vec<GeneId>) {
        let mut pool = GenePool::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = (0..models).map(|_| random_model(&mut rng, &mut pool)).collect();
        (pool, ids)
    }

    #[test]
    fn change_kernel_samples_a_different_value() {
        let mut pool = GenePool::default();
        let l = pool.insert_layer(LayerKind::Conv {
            kernel: 3,
            filters: 16,
            stride: 1,
        });
        let b = pool.insert_block(vec![l], BTreeSet::new()).unwrap();
        let m = pool.insert_model(vec![b], BTreeSet::new()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let rec = apply_mutation(&mut pool, m, MutationKind::ChangeKernel, &mut rng).unwrap();
            let child = pool.model(rec.child_model).unwrap().clone();
            let new_block = pool.block(child.block_refs[0]).unwrap();
            let new_layer = pool.layer(new_block.layer_refs[0]).unwrap();
            match new_layer.kind {
                LayerKind::Conv { kernel, .. } => assert!(kernel == 1 || kernel == 5),
                _ => panic!("kind changed"),
            }
            pool.remove_model(rec.child_model);
        }
    }

    #[test]
    fn remove_block_on_single_block_model_not_applicable() {
        let mut pool = GenePool::default();
        let l = pool.insert_layer(LayerKind::Dense { units: 64 });
        let b = pool.insert_block(vec![l], BTreeSet::new()).unwrap();
        let m = pool.insert_model(vec![b], BTreeSet::new()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = apply_mutation(&mut pool, m, MutationKind::RemoveBlock, &mut rng).unwrap_err();
        assert_eq!(err, MutationError::NotApplicable(MutationKind::RemoveBlock));
    }

    #[test]
    fn add_block_conn_on_complete_dag_not_applicable() {
        let mut pool = GenePool::default();
        let l = pool.insert_layer(LayerKind::Dense { units: 64 });
        let b1 = pool.insert_block(vec![l], BTreeSet::new()).unwrap();
        let b2 = pool.insert_block(vec![l], BTreeSet::new()).unwrap();
        let m = pool
            .insert_model(vec![b1, b2], [(0, 1)].into_iter().collect())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = apply_mutation(&mut pool, m, MutationKind::AddBlockConn, &mut rng).unwrap_err();
        assert_eq!(err, MutationError::NotApplicable(MutationKind::AddBlockConn));
        assert!(!legal_mutations(&pool, m).unwrap().contains(&MutationKind::AddBlockConn));
    }

    #[test]
    fn uncapped_mixed_model_has_all_thirteen_kinds() {
        // two blocks of conv+dense with a removable edge and room to add
        // one, pool far below both caps
        let mut pool = GenePool::default();
        let conv = pool.insert_layer(LayerKind::Conv {
            kernel: 3,
            filters: 16,
            stride: 1,
        });
        let dense = pool.insert_layer(LayerKind::Dense { units: 64 });
        let b1 = pool
            .insert_block(vec![conv, dense, conv], [(0, 1)].into_iter().collect())
            .unwrap();
        let b2 = pool
            .insert_block(vec![dense, conv], [(0, 1)].into_iter().collect())
            .unwrap();
        let b3 = pool.insert_block(vec![conv], BTreeSet::new()).unwrap();
        let m = pool
            .insert_model(vec![b1, b2, b3], [(0, 1)].into_iter().collect())
            .unwrap();
        let legal = legal_mutations(&pool, m).unwrap();
        assert_eq!(legal.len(), 13, "missing: {:?}",
            MutationKind::ALL.iter().filter(|k| !legal.contains(k)).collect::<Vec<_>>());
    }

    #[test]
    fn change_units_excluded_when_all_conv() {
        let mut pool = GenePool::default();
        let l = pool.insert_layer(LayerKind::Conv {
            kernel: 3,
            filters: 8,
            stride: 1,
        });
        let b = pool.insert_block(vec![l], BTreeSet::new()).unwrap();
        let m = pool.insert_model(vec![b], BTreeSet::new()).unwrap();
        let legal = legal_mutations(&pool, m).unwrap();
        assert!(!legal.contains(&MutationKind::ChangeUnits));
        assert!(legal.contains(&MutationKind::ChangeKernel));
    }

    #[test]
    fn layer_cap_reduces_layer_mutations_to_swap() {
        let mut pool = GenePool::default();
        for _ in 0..101 {
            pool.insert_layer(LayerKind::Dense { units: 64 });
        }
        let l = pool.layer_ids()[0];
        let b = pool.insert_block(vec![l], BTreeSet::new()).unwrap();
        let m = pool.insert_model(vec![b], BTreeSet::new()).unwrap();
        assert!(pool.layer_count() > pool.caps().layer_cap);
        let legal = legal_mutations(&pool, m).unwrap();
        assert!(!legal.contains(&MutationKind::ChangeUnits));
        assert!(!legal.contains(&MutationKind::ChangeKernel));
        assert!(legal.contains(&MutationKind::SwapLayer));
        // block and model mutations unaffected
        assert!(legal.contains(&MutationKind::AddLayer));
        assert!(legal.contains(&MutationKind::AddBlock));
    }

    #[test]
    fn block_cap_reduces_block_mutations_to_swap() {
        let mut pool = GenePool::new(PoolCaps {
            layer_cap: 100,
            block_cap: 3,
        });
        let l = pool.insert_layer(LayerKind::Dense { units: 64 });
        let blocks: Vec<GeneId> = (0..4)
            .map(|_| pool.insert_block(vec![l, l], [(0, 1)].into_iter().collect()).unwrap())
            .collect();
        let m = pool.insert_model(vec![blocks[0]], BTreeSet::new()).unwrap();
        let legal = legal_mutations(&pool, m).unwrap();
        for kind in [
            MutationKind::AddLayer,
            MutationKind::RemoveLayer,
            MutationKind::AddLayerConn,
            MutationKind::RemoveLayerConn,
        ] {
            assert!(!legal.contains(&kind), "{kind:?} should be capped");
        }
        assert!(legal.contains(&MutationKind::SwapBlock));
        assert!(legal.contains(&MutationKind::ChangeUnits));
    }

    #[test]
    fn parent_is_immutable_across_mutations() {
        let (mut pool, ids) = seeded_pool(5, 3);
        let parent = ids[0];
        let before = serde_json::to_string(&pool.extract_model(parent).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for kind in MutationKind::ALL {
            let _ = apply_mutation(&mut pool, parent, kind, &mut rng);
        }
        let after = serde_json::to_string(&pool.extract_model(parent).unwrap()).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn five_add_block_mutations_grow_the_model_by_five() {
        let (mut pool, ids) = seeded_pool(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut current = ids[0];
        let start_blocks = pool.model(current).unwrap().block_refs.len();
        for _ in 0..5 {
            let rec = apply_mutation(&mut pool, current, MutationKind::AddBlock, &mut rng).unwrap();
            current = rec.child_model;
        }
        assert_eq!(
            pool.model(current).unwrap().block_refs.len(),
            start_blocks + 5
        );
    }

    #[test]
    fn make_child_applies_exactly_five_and_discards_intermediates() {
        let (mut pool, ids) = seeded_pool(8, 2);
        pool.set_fitness(
            ids[0],
            crate::genome::FitnessValue {
                accuracy: 0.5,
                robustness: 0.25,
            },
        )
        .unwrap();
        let models_before = pool.model_count();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (child, records) = make_child(&mut pool, ids[0], &mut rng).unwrap();
        assert_eq!(records.len(), MUTATIONS_PER_CHILD);
        assert_eq!(records.last().unwrap().child_model, child);
        // exactly one new model persists
        assert_eq!(pool.model_count(), models_before + 1);
        // child starts unevaluated
        assert!(pool.model(child).unwrap().fitness.is_none());
        pool.validate().unwrap();
    }

    #[test]
    fn make_child_is_deterministic() {
        let (pool, ids) = seeded_pool(13, 2);
        let run = |seed: u64| {
            let mut p = pool.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            make_child(&mut p, ids[0], &mut rng).unwrap().1
        };
        assert_eq!(run(7), run(7));
        let a = run(7);
        let b = run(8);
        assert!(a != b || a.iter().zip(&b).all(|(x, y)| x.kind == y.kind));
    }

    #[test]
    fn fuzz_children_satisfy_genome_invariants() {
        let (mut pool, ids) = seeded_pool(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let mut parents = ids;
        for i in 0..300 {
            let parent = parents[i % parents.len()];
            let (child, records) = make_child(&mut pool, parent, &mut rng).unwrap();
            pool.validate().unwrap();
            for rec in &records {
                for g in &rec.created_genes {
                    // created genes may have been GC'd only at generation end,
                    // which has not run, so the final child's genes must exist
                    let _ = g;
                }
            }
            let s = spectrum(&pool, child).unwrap();
            assert_eq!(s.n_dense_layers + s.n_conv_layers, s.n_layers_total);
            if parents.len() < 8 {
                parents.push(child);
            } else {
                pool.remove_model(child);
            }
        }
        // survivors keep reference integrity after GC
        pool.garbage_collect().unwrap();
        pool.validate().unwrap();
        let counts = pool.usage_counts().unwrap();
        for (&_, &n) in &counts {
            assert!(n >= 1);
        }
    }

    #[test]
    fn splice_out_preserves_connectivity() {
        // 0 -> 1 -> 2 with 1 removed leaves 0 -> 1 (old 2)
        let edges: BTreeSet<_> = [(0, 1), (1, 2)].into_iter().collect();
        let spliced = splice_out(&edges, 1);
        assert_eq!(spliced, [(0, 1)].into_iter().collect());
        // removing the entry of a diamond promotes its successors
        let edges: BTreeSet<_> = [(0, 1), (0, 2), (1, 3), (2, 3)].into_iter().collect();
        let spliced = splice_out(&edges, 0);
        assert_eq!(spliced, [(0, 2), (1, 2)].into_iter().collect());
    }
}
