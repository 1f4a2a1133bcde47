//! Seeded construction of random models for the initial population.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    GeneId, GenePool, LayerKind, FILTER_CHOICES, KERNEL_CHOICES, STRIDE_CHOICES, UNIT_CHOICES,
};

pub(crate) fn random_layer_kind<R: Rng>(rng: &mut R) -> LayerKind {
    if rng.gen_bool(0.5) {
        LayerKind::Conv {
            kernel: *KERNEL_CHOICES.choose(rng).unwrap(),
            filters: *FILTER_CHOICES.choose(rng).unwrap(),
            stride: *STRIDE_CHOICES.choose(rng).unwrap(),
        }
    } else {
        LayerKind::Dense {
            units: *UNIT_CHOICES.choose(rng).unwrap(),
        }
    }
}

/// Chain nodes in list order, then add `extra` random forward edges drawn
/// without replacement from the pairs the chain does not already cover.
/// Forward edges keep the graph acyclic by construction.
pub(crate) fn random_wiring<R: Rng>(
    rng: &mut R,
    len: usize,
    extra: usize,
) -> BTreeSet<(usize, usize)> {
    let mut edges: BTreeSet<(usize, usize)> = (1..len).map(|i| (i - 1, i)).collect();
    let mut candidates: Vec<(usize, usize)> = (0..len)
        .flat_map(|i| (i + 1..len).map(move |j| (i, j)))
        .filter(|e| !edges.contains(e))
        .collect();
    candidates.shuffle(rng);
    edges.extend(candidates.into_iter().take(extra));
    edges
}

/// Creates a model with U(2,5) blocks of U(2,5) fresh layers each, inserts
/// every new gene into the pool, and returns the model id. Intra-block and
/// inter-block wiring is a list-order chain plus U(0, n-1) extra forward
/// edges.
pub fn random_model<R: Rng>(rng: &mut R, pool: &mut GenePool) -> GeneId {
    let n_blocks = rng.gen_range(2..=5);
    let mut block_ids = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let n_layers = rng.gen_range(2..=5);
        let layer_ids: Vec<GeneId> = (0..n_layers)
            .map(|_| pool.insert_layer(random_layer_kind(rng)))
            .collect();
        let extra = rng.gen_range(0..=n_layers - 1);
        let edges = random_wiring(rng, n_layers, extra);
        block_ids.push(pool.insert_block(layer_ids, edges).expect("fresh layers"));
    }
    let extra = rng.gen_range(0..=n_blocks - 1);
    let edges = random_wiring(rng, n_blocks, extra);
    pool.insert_model(block_ids, edges).expect("fresh blocks")
}
