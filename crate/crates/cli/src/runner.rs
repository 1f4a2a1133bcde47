//! End-to-end experiment runner: seeded initialization, generation loop,
//! per-generation checkpoints, stats rows and the final report.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ras_core::attacks::read_bank;
use ras_core::events::{Event, EventSink, FileSink};
use ras_core::fitness::{EvalContext, Evaluator, InProcessEvaluator};
use ras_core::genome::{random_model, FitnessValue, GeneId, GenePool, PoolSnapshot};
use ras_core::niching::{
    evolve_generation, generation_stats, BestArchive, ClusterPopulation, NichingConfig,
};

use crate::config::RunConfig;
use crate::stats::StatsWriter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos_lo: u64,
    pub word_pos_hi: u64,
}

impl RngState {
    fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed,
            word_pos_lo: pos as u64,
            word_pos_hi: (pos >> 64) as u64,
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub generation: u64,
    pub config_hash: String,
    pub pool: PoolSnapshot,
    pub clusters: ClusterPopulation,
    pub archive: BestArchive,
    pub rng: RngState,
    pub events_offset: u64,
    pub stats_offset: u64,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading checkpoint {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing checkpoint {}", path.display()))
    }

    fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(self).expect("checkpoint serializes"))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub generations: u64,
    pub population: usize,
    pub best_model: Option<GeneId>,
    pub best_fitness: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub best_robustness: Option<f64>,
    pub out_dir: PathBuf,
}

/// Runs (or resumes) an evolution experiment. Writes, under the output
/// directory: `resolved-config.toml`, `events.jsonl`, `stats.csv`,
/// `checkpoint.json` (every generation), `report.json` and
/// `best_graph.txt`.
pub fn run_evolve(config: &RunConfig, resume: Option<&Path>) -> Result<RunReport> {
    config.validate_for_run()?;
    let data = config.load_dataset()?;
    let bank = read_bank(&config.bank_path)
        .with_context(|| format!("reading bank {}", config.bank_path.display()))?;
    if bank.is_empty() {
        bail!("bank {} is empty", config.bank_path.display());
    }
    let mut ctx = EvalContext::new(
        data.train.clone(),
        bank,
        config.schedule,
        config.train.clone(),
    );
    if config.clean_correct_denominator {
        let sidecar = crate::commands::sidecar_path(&config.bank_path);
        let clean = read_bank(&sidecar)
            .with_context(|| format!("reading clean sidecar {}", sidecar.display()))?;
        ctx.clean_correct_denominator = true;
        ctx.clean_images = Some(clean.records.into_iter().map(|r| r.image).collect());
    }
    let evaluator = InProcessEvaluator::new(ctx, config.seed);
    let parallel = config.parallelism > 1 && !config.serial_deterministic;
    let niching_cfg = NichingConfig {
        normalize_spectrum: config.normalize_spectrum,
        parallel,
        archive_size: config.archive_size,
    };
    let hash = config.hash();

    std::fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("creating {}", config.out_dir.display()))?;
    std::fs::write(config.out_dir.join("resolved-config.toml"), config.to_toml())?;
    let events_path = config.out_dir.join("events.jsonl");
    let stats_path = config.out_dir.join("stats.csv");
    let checkpoint_path = config.out_dir.join("checkpoint.json");

    let pool_runner = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism.max(1))
        .build()
        .context("building worker pool")?;

    let (mut pool, mut clusters, mut archive, mut rng, mut events, mut stats);
    match resume {
        Some(path) => {
            let checkpoint = Checkpoint::load(path)?;
            if checkpoint.config_hash != hash {
                bail!(
                    "checkpoint config hash {} does not match current config {}",
                    checkpoint.config_hash,
                    hash
                );
            }
            pool = GenePool::from_snapshot(&checkpoint.pool)?;
            clusters = checkpoint.clusters.clone();
            archive = checkpoint.archive.clone();
            rng = checkpoint.rng.restore();
            events = FileSink::append_at(&events_path, checkpoint.events_offset)?;
            stats = StatsWriter::append_at(&stats_path, checkpoint.stats_offset)?;
        }
        None => {
            events = FileSink::create(&events_path)?;
            stats = StatsWriter::create(&stats_path)?;
            events.record(&Event::RunStarted {
                config_hash: hash.clone(),
                seed: config.seed,
                population: config.population,
                generations: config.generations,
            });
            rng = ChaCha8Rng::seed_from_u64(config.seed);
            pool = GenePool::new(config.caps);
            let reps: Vec<GeneId> = (0..config.population)
                .map(|_| random_model(&mut rng, &mut pool))
                .collect();
            evaluate_initial(
                &pool_runner,
                parallel,
                &mut pool,
                &reps,
                &evaluator,
                &mut events,
            )?;
            clusters = ClusterPopulation::new(reps);
            archive = BestArchive::default();
            for &rep in &clusters.representatives {
                let value = pool.model(rep)?.fitness.expect("just evaluated");
                archive.offer(&pool, rep, 0, value, config.archive_size)?;
            }
            let row = generation_stats(&pool, &clusters)?;
            events.record(&Event::GenerationStats(row.clone()));
            stats.write_row(&row)?;
            Checkpoint {
                version: 1,
                generation: 0,
                config_hash: hash.clone(),
                pool: pool.snapshot(),
                clusters: clusters.clone(),
                archive: archive.clone(),
                rng: RngState::capture(config.seed, &rng),
                events_offset: events.offset(),
                stats_offset: stats.offset(),
            }
            .save(&checkpoint_path)?;
        }
    }

    while clusters.generation < config.generations {
        clusters = pool_runner.install(|| {
            evolve_generation(
                &clusters,
                &mut pool,
                &evaluator,
                &mut rng,
                &niching_cfg,
                &mut archive,
                &mut events,
            )
        })?;
        let row = generation_stats(&pool, &clusters)?;
        events.record(&Event::GenerationStats(row.clone()));
        stats.write_row(&row)?;
        Checkpoint {
            version: 1,
            generation: clusters.generation,
            config_hash: hash.clone(),
            pool: pool.snapshot(),
            clusters: clusters.clone(),
            archive: archive.clone(),
            rng: RngState::capture(config.seed, &rng),
            events_offset: events.offset(),
            stats_offset: stats.offset(),
        }
        .save(&checkpoint_path)?;
    }

    let best = archive.entries.first();
    let report = RunReport {
        config_hash: hash,
        generations: clusters.generation,
        population: clusters.len(),
        best_model: best.map(|b| b.model),
        best_fitness: best.map(|b| b.fitness),
        best_accuracy: best.map(|b| b.accuracy),
        best_robustness: best.map(|b| b.robustness),
        out_dir: config.out_dir.clone(),
    };
    std::fs::write(
        config.out_dir.join("report.json"),
        serde_json::to_vec_pretty(&report).expect("report serializes"),
    )?;
    if let Some(best) = best {
        let best_pool = GenePool::from_snapshot(&best.snapshot)?;
        let graph = ras_core::graph::compile(
            &best_pool,
            best.model,
            evaluator.ctx.input_shape,
            evaluator.ctx.n_classes,
        )?;
        std::fs::write(config.out_dir.join("best_graph.txt"), ras_core::graph::dump(&graph))?;
    }
    Ok(report)
}

fn evaluate_initial(
    pool_runner: &rayon::ThreadPool,
    parallel: bool,
    pool: &mut GenePool,
    reps: &[GeneId],
    evaluator: &InProcessEvaluator,
    events: &mut FileSink,
) -> Result<()> {
    let results: Vec<_> = if parallel {
        let snapshot: &GenePool = pool;
        pool_runner.install(|| {
            reps.par_iter()
                .map(|&id| evaluator.evaluate_model(snapshot, id, 0))
                .collect()
        })
    } else {
        reps.iter()
            .map(|&id| evaluator.evaluate_model(pool, id, 0))
            .collect()
    };
    for (&id, result) in reps.iter().zip(results) {
        let result = result?;
        if let Some(failure) = &result.failure {
            events.record(&Event::CompileFailed {
                generation: 0,
                model: id,
                message: failure.clone(),
            });
        }
        pool.set_fitness(
            id,
            FitnessValue {
                accuracy: result.report.accuracy,
                robustness: result.report.robustness,
            },
        )?;
        events.record(&Event::ModelEvaluated {
            generation: 0,
            model: id,
            accuracy: result.report.accuracy,
            robustness: result.report.robustness,
            fitness: result.report.fitness,
            train_epochs_used: result.report.train_epochs_used,
            eval_mode: result.report.eval_mode.to_string(),
            cached: result.cached,
        });
    }
    Ok(())
}
