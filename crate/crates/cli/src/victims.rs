//! Built-in victim models the attack pipeline trains before building the
//! bank: a small convolutional network and a small dense network, both
//! expressed as genomes and compiled through the normal pipeline.

use anyhow::{bail, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ras_core::dataset::{split_train_val, DataPair};
use ras_core::genome::{GeneId, GenePool, LayerKind};
use ras_core::graph::compile;
use ras_core::nn::{train, TrainConfig, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VictimKind {
    Cnn,
    Dense,
}

impl std::str::FromStr for VictimKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cnn" => Ok(VictimKind::Cnn),
            "dense" => Ok(VictimKind::Dense),
            other => bail!("unknown victim kind {other:?}, expected cnn or dense"),
        }
    }
}

impl std::fmt::Display for VictimKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VictimKind::Cnn => write!(f, "cnn"),
            VictimKind::Dense => write!(f, "dense"),
        }
    }
}

/// Builds the victim genome in the given pool and returns the model id.
pub fn victim_genome(pool: &mut GenePool, kind: VictimKind) -> GeneId {
    let layers: Vec<LayerKind> = match kind {
        VictimKind::Cnn => vec![
            LayerKind::Conv {
                kernel: 3,
                filters: 16,
                stride: 1,
            },
            LayerKind::Conv {
                kernel: 3,
                filters: 32,
                stride: 2,
            },
            LayerKind::Conv {
                kernel: 3,
                filters: 32,
                stride: 1,
            },
        ],
        VictimKind::Dense => vec![
            LayerKind::Dense { units: 256 },
            LayerKind::Dense { units: 128 },
        ],
    };
    let ids: Vec<GeneId> = layers.into_iter().map(|k| pool.insert_layer(k)).collect();
    let edges = (1..ids.len()).map(|i| (i - 1, i)).collect();
    let block = pool.insert_block(ids, edges).expect("fresh layers");
    pool.insert_model(vec![block], Default::default())
        .expect("fresh block")
}

pub struct TrainedVictim {
    pub kind: VictimKind,
    pub model: TrainedModel,
    pub test_accuracy: f64,
}

/// Trains one victim on the pair's training split and scores it on the
/// held-out test set.
pub fn train_victim(
    kind: VictimKind,
    data: &DataPair,
    base_train: &TrainConfig,
    epochs: usize,
    seed: u64,
) -> Result<TrainedVictim> {
    let mut pool = GenePool::default();
    let model_id = victim_genome(&mut pool, kind);
    let graph = compile(&pool, model_id, data.train.shape, data.train.n_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_idx, val_idx) = split_train_val(data.train.len(), 0.1, &mut rng);
    let cfg = TrainConfig {
        max_epochs: epochs,
        seed,
        ..base_train.clone()
    };
    let (model, outcome) = train(&graph, &data.train, &train_idx, &val_idx, &cfg);
    if outcome.aborted {
        bail!("victim {kind} training aborted on a non-finite loss");
    }
    let test_idx: Vec<usize> = (0..data.test.len()).collect();
    let mut correct = 0usize;
    for chunk in test_idx.chunks(256) {
        let (batch, labels) = data.test.batch(chunk);
        let preds = model.classify_batch(&batch.data, chunk.len());
        correct += preds
            .into_iter()
            .zip(labels)
            .filter(|&(p, l)| p == l)
            .count();
    }
    Ok(TrainedVictim {
        kind,
        model,
        test_accuracy: correct as f64 / data.test.len() as f64,
    })
}
