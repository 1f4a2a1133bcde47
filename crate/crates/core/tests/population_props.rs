//! Property tests over the gene populations: reference integrity under
//! random operation sequences, garbage-collection idempotence, usage
//! counting against a brute-force oracle, and the cap rule on fuzzed
//! mutation traces.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ras_core::genome::{random_model, GeneId, GenePool, PoolCaps};
use ras_core::mutation::{apply_mutation, legal_mutations, make_child, MutationKind};

/// Brute-force usage oracle: walks every model independently.
fn usage_oracle(pool: &GenePool) -> std::collections::BTreeMap<GeneId, usize> {
    let mut counts: std::collections::BTreeMap<GeneId, usize> = std::collections::BTreeMap::new();
    for l in pool.layers() {
        counts.insert(l.id, 0);
    }
    for b in pool.blocks() {
        counts.insert(b.id, 0);
    }
    for model in pool.models() {
        let mut seen = std::collections::BTreeSet::new();
        for &b in &model.block_refs {
            seen.insert(b);
            for &l in &pool.block(b).unwrap().layer_refs {
                seen.insert(l);
            }
        }
        for id in seen {
            *counts.get_mut(&id).unwrap() += 1;
        }
    }
    counts
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn random_op_sequences_preserve_integrity(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = GenePool::default();
        let mut models: Vec<GeneId> = (0..3).map(|_| random_model(&mut rng, &mut pool)).collect();
        for _ in 0..30 {
            match rng.gen_range(0..4) {
                0 => {
                    models.push(random_model(&mut rng, &mut pool));
                }
                1 => {
                    let parent = models[rng.gen_range(0..models.len())];
                    if let Ok((child, _)) = make_child(&mut pool, parent, &mut rng) {
                        models.push(child);
                    }
                }
                2 if models.len() > 1 => {
                    let victim = models.remove(rng.gen_range(0..models.len()));
                    pool.remove_model(victim);
                }
                _ => {
                    pool.garbage_collect().unwrap();
                }
            }
            pool.validate().unwrap();
            prop_assert_eq!(pool.usage_counts().unwrap(), usage_oracle(&pool));
        }
    }

    #[test]
    fn gc_is_idempotent_and_leaves_no_unused_genes(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = GenePool::default();
        let models: Vec<GeneId> = (0..4).map(|_| random_model(&mut rng, &mut pool)).collect();
        for _ in 0..10 {
            let parent = models[rng.gen_range(0..models.len())];
            let _ = make_child(&mut pool, parent, &mut rng);
        }
        pool.garbage_collect().unwrap();
        for &count in pool.usage_counts().unwrap().values() {
            prop_assert!(count >= 1);
        }
        let after_first = pool.clone();
        let second = pool.garbage_collect().unwrap();
        prop_assert!(second.is_empty());
        prop_assert_eq!(pool, after_first);
    }
}

#[test]
fn cap_rule_over_long_mutation_trace() {
    // tight caps so the trace crosses them quickly
    let mut pool = GenePool::new(PoolCaps {
        layer_cap: 30,
        block_cap: 30,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut models: Vec<GeneId> = (0..4).map(|_| random_model(&mut rng, &mut pool)).collect();
    let mut crossed_layer_cap = false;
    let mut crossed_block_cap = false;
    for step in 0..400 {
        let parent = models[step % models.len()];
        let layers_before = pool.layer_count();
        let blocks_before = pool.block_count();
        let legal: Vec<MutationKind> = legal_mutations(&pool, parent).unwrap().into_iter().collect();

        // above a cap, the only mutation of that class left is swap
        if layers_before > 30 {
            crossed_layer_cap = true;
            for k in &legal {
                if k.is_layer_mutation() {
                    assert_eq!(*k, MutationKind::SwapLayer);
                }
            }
        }
        if blocks_before > 30 {
            crossed_block_cap = true;
            for k in &legal {
                if k.is_block_mutation() {
                    assert_eq!(*k, MutationKind::SwapBlock);
                }
            }
        }

        let kind = legal[step % legal.len()];
        let Ok(record) = apply_mutation(&mut pool, parent, kind, &mut rng) else {
            continue;
        };
        // growth sourcing: above the layer cap nothing may create layers;
        // above the block cap only layer-mutation cloning may create blocks
        if layers_before > 30 {
            assert_eq!(pool.layer_count(), layers_before, "step {step} {kind:?}");
        }
        if blocks_before > 30 && pool.block_count() > blocks_before {
            assert!(
                kind.is_layer_mutation(),
                "step {step}: {kind:?} grew blocks above the cap"
            );
        }
        models.push(record.child_model);
        if models.len() > 8 {
            let victim = models.remove(0);
            pool.remove_model(victim);
        }
    }
    pool.garbage_collect().unwrap();
    pool.validate().unwrap();
    assert!(crossed_layer_cap, "trace never exceeded the layer cap");
    assert!(crossed_block_cap, "trace never exceeded the block cap");
}
