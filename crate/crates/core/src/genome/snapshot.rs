//! Pool snapshot serialization: one self-describing document with
//! `layers`, `blocks` and `models` arrays. Used by checkpoints and the
//! external-evaluator protocol.

use serde::{Deserialize, Serialize};

use super::{BlockGene, GeneId, GenePool, GenomeError, LayerGene, ModelGene, PoolCaps};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSnapshot {
    pub layers: Vec<LayerGene>,
    pub blocks: Vec<BlockGene>,
    pub models: Vec<ModelGene>,
    pub caps: PoolCaps,
    pub next_id: u64,
}

impl GenePool {
    pub fn snapshot(&self) -> PoolSnapshot {
        PoolSnapshot {
            layers: self.layers.values().cloned().collect(),
            blocks: self.blocks.values().cloned().collect(),
            models: self.models.values().cloned().collect(),
            caps: self.caps,
            next_id: self.next_id,
        }
    }

    pub fn from_snapshot(snap: &PoolSnapshot) -> Result<Self, GenomeError> {
        let mut pool = GenePool::new(snap.caps);
        for layer in &snap.layers {
            if pool.layers.insert(layer.id, *layer).is_some() {
                return Err(GenomeError::DuplicateId(layer.id));
            }
        }
        for block in &snap.blocks {
            if pool.blocks.insert(block.id, block.clone()).is_some() {
                return Err(GenomeError::DuplicateId(block.id));
            }
        }
        for model in &snap.models {
            if pool.models.insert(model.id, model.clone()).is_some() {
                return Err(GenomeError::DuplicateId(model.id));
            }
        }
        let max_seen = snap
            .layers
            .iter()
            .map(|l| l.id.0)
            .chain(snap.blocks.iter().map(|b| b.id.0))
            .chain(snap.models.iter().map(|m| m.id.0))
            .max()
            .map_or(0, |m| m + 1);
        pool.next_id = snap.next_id.max(max_seen);
        pool.validate()?;
        Ok(pool)
    }

    /// Snapshot containing one model and the closure of genes it uses.
    /// This is the wire form sent to external evaluators and kept in the
    /// best-model archive.
    pub fn extract_model(&self, id: GeneId) -> Result<PoolSnapshot, GenomeError> {
        let model = self.model(id)?;
        let mut blocks: Vec<BlockGene> = Vec::new();
        let mut layers: Vec<LayerGene> = Vec::new();
        let mut seen_blocks = std::collections::BTreeSet::new();
        let mut seen_layers = std::collections::BTreeSet::new();
        for &block_id in &model.block_refs {
            if !seen_blocks.insert(block_id) {
                continue;
            }
            let block = self.block(block_id).map_err(|_| GenomeError::DanglingBlock {
                model: id,
                block: block_id,
            })?;
            for &layer_id in &block.layer_refs {
                if seen_layers.insert(layer_id) {
                    layers.push(*self.layer(layer_id).map_err(|_| GenomeError::DanglingLayer {
                        block: block_id,
                        layer: layer_id,
                    })?);
                }
            }
            blocks.push(block.clone());
        }
        layers.sort_by_key(|l| l.id);
        blocks.sort_by_key(|b| b.id);
        // self-contained: the id horizon depends only on the closure, so
        // extracting the same model twice yields identical bytes
        let next_id = layers
            .iter()
            .map(|l| l.id.0)
            .chain(blocks.iter().map(|b| b.id.0))
            .chain(std::iter::once(model.id.0))
            .max()
            .map_or(0, |m| m + 1);
        Ok(PoolSnapshot {
            layers,
            blocks,
            models: vec![model.clone()],
            caps: self.caps,
            next_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::random_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn snapshot_round_trip_is_identical() {
        let mut pool = GenePool::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..5 {
            random_model(&mut rng, &mut pool);
        }
        let snap = pool.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        let parsed: PoolSnapshot = serde_json::from_str(&json).unwrap();
        let restored = GenePool::from_snapshot(&parsed).unwrap();
        assert_eq!(restored, pool);
        // serialization is byte-stable
        assert_eq!(serde_json::to_string(&restored.snapshot()).unwrap(), json);
    }

    #[test]
    fn extract_model_keeps_only_the_closure() {
        let mut pool = GenePool::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let keep = random_model(&mut rng, &mut pool);
        let drop = random_model(&mut rng, &mut pool);
        let snap = pool.extract_model(keep).unwrap();
        assert_eq!(snap.models.len(), 1);
        assert_eq!(snap.models[0].id, keep);
        let sub = GenePool::from_snapshot(&snap).unwrap();
        sub.validate().unwrap();
        assert!(sub.model(drop).is_err());
        assert_eq!(
            sub.model(keep).unwrap().block_refs,
            pool.model(keep).unwrap().block_refs
        );
    }

    #[test]
    fn ids_in_snapshot_are_plain_integers() {
        let mut pool = GenePool::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        random_model(&mut rng, &mut pool);
        let value = serde_json::to_value(pool.snapshot()).unwrap();
        let first = &value["layers"][0]["id"];
        assert!(first.is_u64());
    }
}
