//! Spectrum-based niching: every member of the initial population is a
//! cluster representative; each generation builds two children per
//! representative from five stacked mutations, and a child replaces the
//! representative nearest to it in spectrum space when strictly fitter.
//! Replacement is sequential, so later children compete against the
//! updated cluster population.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{ClusterStat, Event, EventSink, GenerationStats};
use crate::fitness::{EvalResult, Evaluator, FitnessError};
use crate::genome::{
    spectrum, FitnessValue, GeneId, GenePool, GenomeError, PoolSnapshot, Spectrum,
};
use crate::mutation::{make_child, MutationError};

/// Euclidean distance over the 10 raw spectrum features.
pub fn spectrum_distance(a: &Spectrum, b: &Spectrum) -> f64 {
    a.as_array()
        .iter()
        .zip(b.as_array())
        .map(|(&x, y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// The cluster representatives. Length stays fixed across generations:
/// children replace representatives, never add or remove slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPopulation {
    pub representatives: Vec<GeneId>,
    pub generation: u64,
}

impl ClusterPopulation {
    pub fn new(representatives: Vec<GeneId>) -> Self {
        ClusterPopulation {
            representatives,
            generation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.representatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.representatives.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NichingConfig {
    /// Min-max normalize spectrum features across the current
    /// representatives before measuring distance. Raw counts by default.
    pub normalize_spectrum: bool,
    /// Evaluate the generation's children on a rayon pool. Children are
    /// then built up front from the entering representatives instead of
    /// interleaved with replacement, which serial mode does.
    pub parallel: bool,
    pub archive_size: usize,
}

impl Default for NichingConfig {
    fn default() -> Self {
        NichingConfig {
            normalize_spectrum: false,
            parallel: false,
            archive_size: 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum NichingError {
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error(transparent)]
    Mutation(#[from] MutationError),
    #[error("representative {0} has no evaluated fitness")]
    Unevaluated(GeneId),
    #[error(transparent)]
    Fitness(#[from] FitnessError),
}

/// Best-ever models, kept for reporting only; entries never re-enter
/// evolution. Snapshots survive pool garbage collection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BestArchive {
    pub entries: Vec<ArchiveEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub model: GeneId,
    pub generation: u64,
    pub accuracy: f64,
    pub robustness: f64,
    pub fitness: f64,
    pub snapshot: PoolSnapshot,
}

impl BestArchive {
    pub fn offer(
        &mut self,
        pool: &GenePool,
        model: GeneId,
        generation: u64,
        value: FitnessValue,
        cap: usize,
    ) -> Result<(), GenomeError> {
        let worst = self.entries.last().map(|e| e.fitness).unwrap_or(f64::MIN);
        if self.entries.len() >= cap && value.fitness() <= worst {
            return Ok(());
        }
        self.entries.push(ArchiveEntry {
            model,
            generation,
            accuracy: value.accuracy,
            robustness: value.robustness,
            fitness: value.fitness(),
            snapshot: pool.extract_model(model)?,
        });
        self.entries.sort_by(|a, b| {
            b.fitness
                .partial_cmp(&a.fitness)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.generation.cmp(&b.generation))
                .then(a.model.cmp(&b.model))
        });
        self.entries.truncate(cap);
        Ok(())
    }
}

fn fitness_of(pool: &GenePool, id: GeneId) -> Result<FitnessValue, NichingError> {
    pool.model(id)?
        .fitness
        .ok_or(NichingError::Unevaluated(id))
}

/// Index of the representative nearest to `target`, lowest index winning
/// ties. With normalization on, features are min-max scaled over the
/// representatives plus the child before measuring.
fn nearest_representative(
    rep_spectra: &[Spectrum],
    target: &Spectrum,
    normalize: bool,
) -> usize {
    if !normalize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, s) in rep_spectra.iter().enumerate() {
            let d = spectrum_distance(s, target);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        return best;
    }
    let mut lo = [u32::MAX; 10];
    let mut hi = [0u32; 10];
    for s in rep_spectra.iter().chain(std::iter::once(target)) {
        for (j, v) in s.as_array().into_iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let scale = |s: &Spectrum| -> [f64; 10] {
        let mut out = [0f64; 10];
        for (j, v) in s.as_array().into_iter().enumerate() {
            let range = (hi[j] - lo[j]) as f64;
            out[j] = if range > 0.0 {
                (v - lo[j]) as f64 / range
            } else {
                0.0
            };
        }
        out
    };
    let t = scale(target);
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, s) in rep_spectra.iter().enumerate() {
        let sv = scale(s);
        let d: f64 = sv
            .iter()
            .zip(&t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Builds one child, falling back to an unchanged clone of the parent when
/// every mutation slot is exhausted (degenerate pools).
fn build_child<R: Rng>(
    pool: &mut GenePool,
    parent: GeneId,
    generation: u64,
    rng: &mut R,
    events: &mut dyn EventSink,
) -> Result<GeneId, NichingError> {
    match make_child(pool, parent, rng) {
        Ok((child, records)) => {
            for record in records {
                events.record(&Event::Mutation {
                    generation,
                    record,
                });
            }
            Ok(child)
        }
        Err(MutationError::Exhausted) => {
            events.record(&Event::MutationExhausted { generation, parent });
            let model = pool.model(parent)?.clone();
            let child = pool.insert_model(model.block_refs, model.block_edges)?;
            Ok(child)
        }
        Err(e) => Err(e.into()),
    }
}

struct DecisionCtx<'a> {
    generation: u64,
    cfg: &'a NichingConfig,
}

/// Applies one evaluated child to the cluster population: nearest
/// representative by spectrum, strict fitness comparison, immediate
/// replacement. Unsuccessful children leave the model population.
#[allow(clippy::too_many_arguments)]
fn decide_child(
    ctx: &DecisionCtx,
    pool: &mut GenePool,
    reps: &mut [GeneId],
    rep_spectra: &mut [Spectrum],
    child: GeneId,
    evaluation: Result<EvalResult, FitnessError>,
    archive: &mut BestArchive,
    events: &mut dyn EventSink,
) -> Result<(), NichingError> {
    let generation = ctx.generation;
    let result = match evaluation {
        Ok(r) => r,
        Err(e) => {
            events.record(&Event::EvalFailed {
                generation,
                model: child,
                message: e.to_string(),
            });
            events.record(&Event::ChildDiscarded {
                generation,
                child,
                reason: "evaluation failed".into(),
            });
            pool.remove_model(child);
            return Ok(());
        }
    };
    if let Some(message) = &result.failure {
        events.record(&Event::CompileFailed {
            generation,
            model: child,
            message: message.clone(),
        });
    }
    let value = FitnessValue {
        accuracy: result.report.accuracy,
        robustness: result.report.robustness,
    };
    pool.set_fitness(child, value)?;
    events.record(&Event::ModelEvaluated {
        generation,
        model: child,
        accuracy: value.accuracy,
        robustness: value.robustness,
        fitness: value.fitness(),
        train_epochs_used: result.report.train_epochs_used,
        eval_mode: result.report.eval_mode.to_string(),
        cached: result.cached,
    });
    archive.offer(pool, child, generation, value, ctx.cfg.archive_size)?;

    let child_spectrum = spectrum(pool, child)?;
    let idx = nearest_representative(rep_spectra, &child_spectrum, ctx.cfg.normalize_spectrum);
    let incumbent = fitness_of(pool, reps[idx])?;
    if value.fitness() > incumbent.fitness() {
        events.record(&Event::Replaced {
            generation,
            cluster_index: idx,
            old: reps[idx],
            new: child,
        });
        let old = reps[idx];
        reps[idx] = child;
        rep_spectra[idx] = child_spectrum;
        pool.remove_model(old);
    } else {
        events.record(&Event::ChildDiscarded {
            generation,
            child,
            reason: "not fitter than nearest representative".into(),
        });
        pool.remove_model(child);
    }
    Ok(())
}

/// Runs one generation of the niching strategy and returns the updated
/// cluster population. Serial mode (`cfg.parallel == false`) is the
/// normative procedure: per representative, build two children, evaluate,
/// and decide each immediately. Parallel mode builds the whole child
/// population from the entering representatives, evaluates it on a rayon
/// pool (per-model derived seeds keep results order-independent), then
/// applies the same sequential decisions; it is deterministic for a fixed
/// config but its trace may differ from serial mode.
pub fn evolve_generation<E: Evaluator + ?Sized>(
    clusters: &ClusterPopulation,
    pool: &mut GenePool,
    evaluator: &E,
    rng: &mut ChaCha8Rng,
    cfg: &NichingConfig,
    archive: &mut BestArchive,
    events: &mut dyn EventSink,
) -> Result<ClusterPopulation, NichingError> {
    let generation = clusters.generation + 1;
    let mut reps = clusters.representatives.clone();
    for &rep in &reps {
        fitness_of(pool, rep)?;
    }
    let mut rep_spectra: Vec<Spectrum> = reps
        .iter()
        .map(|&id| spectrum(pool, id))
        .collect::<Result<_, _>>()?;
    let ctx = DecisionCtx { generation, cfg };

    if cfg.parallel {
        let mut children = Vec::with_capacity(reps.len() * 2);
        let parents: Vec<GeneId> = reps.clone();
        for parent in parents {
            for _ in 0..2 {
                children.push(build_child(pool, parent, generation, rng, events)?);
            }
        }
        let snapshot: &GenePool = pool;
        let evaluations: Vec<Result<EvalResult, FitnessError>> = children
            .par_iter()
            .map(|&child| evaluator.evaluate_model(snapshot, child, generation))
            .collect();
        for (child, evaluation) in children.into_iter().zip(evaluations) {
            decide_child(
                &ctx,
                pool,
                &mut reps,
                &mut rep_spectra,
                child,
                evaluation,
                archive,
                events,
            )?;
        }
    } else {
        for i in 0..reps.len() {
            let parent = reps[i];
            let first = build_child(pool, parent, generation, rng, events)?;
            let second = build_child(pool, parent, generation, rng, events)?;
            for child in [first, second] {
                let evaluation = evaluator.evaluate_model(pool, child, generation);
                decide_child(
                    &ctx,
                    pool,
                    &mut reps,
                    &mut rep_spectra,
                    child,
                    evaluation,
                    archive,
                    events,
                )?;
            }
        }
    }

    let gc = pool.garbage_collect()?;
    events.record(&Event::GcRun {
        generation,
        removed_layers: gc.removed_layers.len(),
        removed_blocks: gc.removed_blocks.len(),
    });
    Ok(ClusterPopulation {
        representatives: reps,
        generation,
    })
}

/// Aggregates the per-generation stats record over the representatives.
pub fn generation_stats(
    pool: &GenePool,
    clusters: &ClusterPopulation,
) -> Result<GenerationStats, NichingError> {
    let n = clusters.len() as f64;
    let mut stats = GenerationStats {
        generation: clusters.generation,
        mean_fitness: 0.0,
        max_fitness: f64::MIN,
        mean_accuracy: 0.0,
        mean_robustness: 0.0,
        mean_blocks: 0.0,
        mean_layers: 0.0,
        mean_block_conns: 0.0,
        mean_layer_conns: 0.0,
        mean_layers_per_block: 0.0,
        mean_conns_per_block: 0.0,
        mean_spectrum: [0.0; 10],
        clusters: Vec::with_capacity(clusters.len()),
    };
    for &id in &clusters.representatives {
        let value = fitness_of(pool, id)?;
        let s = spectrum(pool, id)?;
        let model = pool.model(id)?;
        let intra_conns: usize = model
            .block_refs
            .iter()
            .map(|&b| pool.block(b).map(|blk| blk.layer_edges.len()))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .sum();
        stats.mean_fitness += value.fitness() / n;
        stats.max_fitness = stats.max_fitness.max(value.fitness());
        stats.mean_accuracy += value.accuracy / n;
        stats.mean_robustness += value.robustness / n;
        stats.mean_blocks += s.n_blocks as f64 / n;
        stats.mean_layers += s.n_layers_total as f64 / n;
        stats.mean_block_conns += s.n_block_conns as f64 / n;
        stats.mean_layer_conns += s.n_layer_conns_total as f64 / n;
        stats.mean_layers_per_block += s.n_layers_total as f64 / s.n_blocks as f64 / n;
        stats.mean_conns_per_block += intra_conns as f64 / s.n_blocks as f64 / n;
        for (slot, v) in stats.mean_spectrum.iter_mut().zip(s.as_array()) {
            *slot += v as f64 / n;
        }
        stats.clusters.push(ClusterStat {
            model: id,
            accuracy: value.accuracy,
            robustness: value.robustness,
            fitness: value.fitness(),
            spectrum: s,
        });
    }
    Ok(stats)
}
