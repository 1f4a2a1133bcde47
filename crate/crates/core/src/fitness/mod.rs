//! Fitness = accuracy + robustness.
//!
//! Accuracy is the held-out validation accuracy after training on the
//! scheduled budget: the whole training set every `full_every` generations
//! and a fresh seeded subset otherwise. Robustness is accuracy on the
//! adversarial bank. Attacks never run inside the loop; the bank is the
//! transfer proxy.

mod external;

pub use external::{external_evaluate, EvalRequest, EvalResponse, ExternalEvaluator,
                   ExternalEvaluatorConfig};

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::AdversarialBank;
use crate::dataset::{split_train_val, Dataset};
use crate::genome::{GeneId, GenePool};
use crate::graph::TensorShape;
use crate::nn::{train, TrainConfig, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    FullSet,
    Subset,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalMode::FullSet => write!(f, "full_set"),
            EvalMode::Subset => write!(f, "subset"),
        }
    }
}

/// Outcome of one model evaluation. `fitness` is accuracy plus robustness
/// by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub accuracy: f64,
    pub robustness: f64,
    pub fitness: f64,
    pub train_epochs_used: usize,
    pub eval_mode: EvalMode,
}

impl FitnessReport {
    pub fn new(
        accuracy: f64,
        robustness: f64,
        train_epochs_used: usize,
        eval_mode: EvalMode,
    ) -> Self {
        FitnessReport {
            accuracy,
            robustness,
            fitness: accuracy + robustness,
            train_epochs_used,
            eval_mode,
        }
    }

    pub fn zero(eval_mode: EvalMode) -> Self {
        FitnessReport::new(0.0, 0.0, 0, eval_mode)
    }
}

/// When to train on the full set versus a random subset, and for how long.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalSchedule {
    pub full_every: u64,
    pub full_epochs: usize,
    pub subset_size: usize,
    pub subset_epochs: usize,
}

impl Default for EvalSchedule {
    fn default() -> Self {
        EvalSchedule {
            full_every: 10,
            full_epochs: 50,
            subset_size: 1000,
            subset_epochs: 50,
        }
    }
}

impl EvalSchedule {
    pub fn mode_for(&self, generation: u64) -> EvalMode {
        if generation.is_multiple_of(self.full_every) {
            EvalMode::FullSet
        } else {
            EvalMode::Subset
        }
    }
}

#[derive(Debug, Error)]
pub enum FitnessError {
    #[error("adversarial bank is empty")]
    EmptyBank,
    #[error("evaluator failure: {0}")]
    Evaluator(String),
}

/// Why an evaluation produced a zero report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalFailure {
    Compile(String),
    TrainingAborted,
}

/// Everything an in-process evaluation needs besides the genome.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub dataset: Dataset,
    pub bank: AdversarialBank,
    pub schedule: EvalSchedule,
    pub train: TrainConfig,
    pub input_shape: TensorShape,
    pub n_classes: usize,
    /// Fraction of the training budget held out for validation.
    pub val_frac: f64,
    /// Score robustness against only the bank samples the model classifies
    /// correctly clean (requires the sidecar images); off by default, the
    /// denominator is then the whole bank.
    pub clean_correct_denominator: bool,
    pub clean_images: Option<Vec<Vec<f32>>>,
}

impl EvalContext {
    pub fn new(dataset: Dataset, bank: AdversarialBank, schedule: EvalSchedule, train: TrainConfig) -> Self {
        let input_shape = dataset.shape;
        let n_classes = dataset.n_classes;
        EvalContext {
            dataset,
            bank,
            schedule,
            train,
            input_shape,
            n_classes,
            val_frac: 0.1,
            clean_correct_denominator: false,
            clean_images: None,
        }
    }
}

/// Batch classifier interface consumed by robustness scoring; test doubles
/// implement it directly.
pub trait ImageClassifier {
    fn classify_images(&self, images: &[f32], n: usize) -> Vec<usize>;
}

impl ImageClassifier for TrainedModel {
    fn classify_images(&self, images: &[f32], n: usize) -> Vec<usize> {
        self.classify_batch(images, n)
    }
}

/// Fraction of bank samples the model still classifies correctly; the
/// complement of attack success rate over the bank.
pub fn score_robustness<C: ImageClassifier + ?Sized>(
    model: &C,
    bank: &AdversarialBank,
) -> Result<f64, FitnessError> {
    if bank.is_empty() {
        return Err(FitnessError::EmptyBank);
    }
    let correct = count_correct(model, bank.records.iter().map(|r| (&r.image, r.true_label)), bank.image_len());
    Ok(correct as f64 / bank.len() as f64)
}

/// Robustness with the alternative denominator: only bank pairs whose
/// clean image the model gets right count, and the score is the fraction
/// of those that survive the perturbed image.
pub fn score_robustness_clean_correct<C: ImageClassifier + ?Sized>(
    model: &C,
    bank: &AdversarialBank,
    clean_images: &[Vec<f32>],
) -> Result<f64, FitnessError> {
    if bank.is_empty() {
        return Err(FitnessError::EmptyBank);
    }
    let image_len = bank.image_len();
    let labels: Vec<u16> = bank.records.iter().map(|r| r.true_label).collect();
    let clean_ok: Vec<bool> = classify_all(model, clean_images.iter(), image_len)
        .into_iter()
        .zip(&labels)
        .map(|(pred, &label)| pred == label as usize)
        .collect();
    let adv_ok: Vec<bool> = classify_all(model, bank.records.iter().map(|r| &r.image), image_len)
        .into_iter()
        .zip(&labels)
        .map(|(pred, &label)| pred == label as usize)
        .collect();
    let denom = clean_ok.iter().filter(|&&ok| ok).count();
    if denom == 0 {
        return Ok(0.0);
    }
    let kept = clean_ok
        .iter()
        .zip(&adv_ok)
        .filter(|&(&c, &a)| c && a)
        .count();
    Ok(kept as f64 / denom as f64)
}

fn classify_all<'a, C: ImageClassifier + ?Sized>(
    model: &C,
    images: impl Iterator<Item = &'a Vec<f32>>,
    image_len: usize,
) -> Vec<usize> {
    let mut preds = Vec::new();
    let mut batch: Vec<f32> = Vec::new();
    let mut in_batch = 0usize;
    for img in images {
        batch.extend_from_slice(img);
        in_batch += 1;
        if in_batch == 128 {
            preds.extend(model.classify_images(&batch, in_batch));
            batch.clear();
            in_batch = 0;
        }
    }
    if in_batch > 0 {
        preds.extend(model.classify_images(&batch, in_batch));
    }
    let _ = image_len;
    preds
}

fn count_correct<'a, C: ImageClassifier + ?Sized>(
    model: &C,
    records: impl Iterator<Item = (&'a Vec<f32>, u16)>,
    image_len: usize,
) -> usize {
    let mut labels = Vec::new();
    let images: Vec<&Vec<f32>> = records
        .map(|(img, label)| {
            labels.push(label);
            img
        })
        .collect();
    classify_all(model, images.into_iter(), image_len)
        .into_iter()
        .zip(labels)
        .filter(|&(pred, label)| pred == label as usize)
        .count()
}

/// Evaluates one model: compile, train on the scheduled budget, score the
/// bank. Compile failures and aborted trainings yield a zero report with
/// the failure attached; evolution treats those genomes as unfit.
pub fn evaluate(
    pool: &GenePool,
    model_id: GeneId,
    ctx: &EvalContext,
    generation: u64,
    rng: &mut ChaCha8Rng,
) -> (FitnessReport, Option<EvalFailure>, Option<TrainedModel>) {
    let mode = ctx.schedule.mode_for(generation);
    let graph = match crate::graph::compile(pool, model_id, ctx.input_shape, ctx.n_classes) {
        Ok(g) => g,
        Err(e) => {
            return (
                FitnessReport::zero(mode),
                Some(EvalFailure::Compile(e.to_string())),
                None,
            )
        }
    };

    let n = ctx.dataset.len();
    let (indices, epochs) = match mode {
        EvalMode::FullSet => ((0..n).collect::<Vec<usize>>(), ctx.schedule.full_epochs),
        EvalMode::Subset => {
            let size = ctx.schedule.subset_size.min(n);
            (
                rand::seq::index::sample(rng, n, size).into_vec(),
                ctx.schedule.subset_epochs,
            )
        }
    };
    let mut split_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let (train_pos, val_pos) = split_train_val(indices.len(), ctx.val_frac, &mut split_rng);
    let train_idx: Vec<usize> = train_pos.into_iter().map(|p| indices[p]).collect();
    let val_idx: Vec<usize> = val_pos.into_iter().map(|p| indices[p]).collect();

    let cfg = TrainConfig {
        max_epochs: epochs,
        seed: rng.gen(),
        ..ctx.train.clone()
    };
    let (model, outcome) = train(&graph, &ctx.dataset, &train_idx, &val_idx, &cfg);
    if outcome.aborted {
        return (
            FitnessReport::zero(mode),
            Some(EvalFailure::TrainingAborted),
            None,
        );
    }
    let robustness = match (ctx.clean_correct_denominator, &ctx.clean_images) {
        (true, Some(clean)) => score_robustness_clean_correct(&model, &ctx.bank, clean),
        _ => score_robustness(&model, &ctx.bank),
    }
    .unwrap_or(0.0);
    (
        FitnessReport::new(outcome.val_accuracy, robustness, outcome.epochs_used, mode),
        None,
        Some(model),
    )
}

/// What the niching loop needs back from an evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub report: FitnessReport,
    pub cached: bool,
    pub failure: Option<String>,
}

/// Fitness evaluation service. Implementations must be safe to call from
/// multiple worker threads.
pub trait Evaluator: Sync {
    fn evaluate_model(
        &self,
        pool: &GenePool,
        model: GeneId,
        generation: u64,
    ) -> Result<EvalResult, FitnessError>;
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Seed for one evaluation, derived from run seed, generation and model
/// id. Evaluations are order-independent, so parallel scheduling cannot
/// change results.
pub fn eval_seed(base: u64, generation: u64, model: GeneId) -> u64 {
    splitmix(base ^ splitmix(generation ^ splitmix(model.0)))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    model: GeneId,
    seed: u64,
    schedule: EvalSchedule,
    mode: EvalMode,
}

/// Trains and scores genomes in this process, memoizing reports keyed by
/// genome, derived seed, schedule and evaluation mode.
pub struct InProcessEvaluator {
    pub ctx: EvalContext,
    pub base_seed: u64,
    cache: Mutex<HashMap<CacheKey, FitnessReport>>,
    trainings: AtomicUsize,
}

impl InProcessEvaluator {
    pub fn new(ctx: EvalContext, base_seed: u64) -> Self {
        InProcessEvaluator {
            ctx,
            base_seed,
            cache: Mutex::new(HashMap::new()),
            trainings: AtomicUsize::new(0),
        }
    }

    /// Number of actual (uncached) trainings performed.
    pub fn trainings(&self) -> usize {
        self.trainings.load(Ordering::Relaxed)
    }
}

impl Evaluator for InProcessEvaluator {
    fn evaluate_model(
        &self,
        pool: &GenePool,
        model: GeneId,
        generation: u64,
    ) -> Result<EvalResult, FitnessError> {
        let seed = eval_seed(self.base_seed, generation, model);
        let key = CacheKey {
            model,
            seed,
            schedule: self.ctx.schedule,
            mode: self.ctx.schedule.mode_for(generation),
        };
        if let Some(report) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(EvalResult {
                report: report.clone(),
                cached: true,
                failure: None,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (report, failure, _) = evaluate(pool, model, &self.ctx, generation, &mut rng);
        self.trainings.fetch_add(1, Ordering::Relaxed);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, report.clone());
        Ok(EvalResult {
            report,
            cached: false,
            failure: failure.map(|f| match f {
                EvalFailure::Compile(msg) => format!("compile: {msg}"),
                EvalFailure::TrainingAborted => "training aborted (non-finite loss)".into(),
            }),
        })
    }
}
