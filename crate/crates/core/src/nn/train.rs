//! Seeded training with SGD momentum and two-metric early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GraphRuntime, TrainedModel};
use crate::dataset::Dataset;
use crate::graph::CompiledGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// A metric is "unchanged" when it moved at most this much against
    /// every epoch in the patience window.
    pub early_stop_delta: f64,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            early_stop_delta: 0.001,
            early_stop_patience: 15,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub val_accuracy: f64,
    pub train_accuracy: f64,
    pub epochs_used: usize,
    /// Training hit a non-finite loss and returned accuracy zero.
    pub aborted: bool,
    pub epochs: Vec<EpochStats>,
}

/// True once the newest value differs by at most `delta` from every value
/// in the preceding `patience` epochs. Needs `patience + 1` entries.
pub fn early_stop_hit(history: &[f64], patience: usize, delta: f64) -> bool {
    let n = history.len();
    if n < patience + 1 {
        return false;
    }
    let current = history[n - 1];
    history[n - 1 - patience..n - 1]
        .iter()
        .all(|&v| (v - current).abs() <= delta)
}

pub(crate) fn accuracy(
    runtime: &GraphRuntime<f32>,
    data: &Dataset,
    indices: &[usize],
) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(256) {
        let (batch, labels) = data.batch(chunk);
        let probs = runtime.forward(&batch).expect("dataset matches graph input");
        for (pred, label) in probs.argmax_rows().into_iter().zip(labels) {
            correct += usize::from(pred == label);
        }
    }
    correct as f64 / indices.len() as f64
}

/// Trains a compiled graph on the given index split. Weight init and batch
/// shuffling derive from `cfg.seed`; a run is bit-for-bit reproducible.
/// Stops at `max_epochs` or once training and validation accuracy have
/// both been flat for the patience window. A non-finite loss aborts with
/// accuracy zero.
pub fn train(
    graph: &CompiledGraph,
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> (TrainedModel, TrainOutcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut runtime = GraphRuntime::<f32>::init(graph.clone(), &mut rng);
    let lr = cfg.learning_rate as f32;
    let momentum = cfg.momentum as f32;

    let mut order: Vec<usize> = train_idx.to_vec();
    let mut train_hist: Vec<f64> = Vec::new();
    let mut val_hist: Vec<f64> = Vec::new();
    let mut epochs: Vec<EpochStats> = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (batch, labels) = data.batch(chunk);
            let trace = match runtime.forward_trace(&batch) {
                Ok(t) => t,
                Err(_) => {
                    return abort(runtime, epochs, epoch);
                }
            };
            let loss = runtime.backward(&trace, &labels);
            if !loss.is_finite() {
                return abort(runtime, epochs, epoch);
            }
            loss_sum += loss as f64;
            n_batches += 1;
            runtime.sgd_step(lr, momentum);
        }
        let train_acc = accuracy(&runtime, data, train_idx);
        let val_acc = accuracy(&runtime, data, val_idx);
        train_hist.push(train_acc);
        val_hist.push(val_acc);
        epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / n_batches.max(1) as f64,
            train_accuracy: train_acc,
            val_accuracy: val_acc,
        });
        if early_stop_hit(&train_hist, cfg.early_stop_patience, cfg.early_stop_delta)
            && early_stop_hit(&val_hist, cfg.early_stop_patience, cfg.early_stop_delta)
        {
            break;
        }
    }
    if runtime.has_non_finite() {
        let used = epochs.len();
        return abort(runtime, epochs, used);
    }
    let outcome = TrainOutcome {
        val_accuracy: val_hist.last().copied().unwrap_or(0.0),
        train_accuracy: train_hist.last().copied().unwrap_or(0.0),
        epochs_used: epochs.len(),
        aborted: false,
        epochs,
    };
    (TrainedModel::new(runtime), outcome)
}

fn abort(
    runtime: GraphRuntime<f32>,
    epochs: Vec<EpochStats>,
    epoch: usize,
) -> (TrainedModel, TrainOutcome) {
    (
        TrainedModel::new(runtime),
        TrainOutcome {
            val_accuracy: 0.0,
            train_accuracy: 0.0,
            epochs_used: epoch,
            aborted: true,
            epochs,
        },
    )
}
