//! Implementations behind the CLI subcommands that are not the evolution
//! runner: bank building, single-genome evaluation and graph dumps.

use std::path::Path;

use anyhow::{bail, Context, Result};

use ras_core::attacks::{
    build_bank, read_bank, verify_bank, write_bank, AttackNorm, AttackSpec,
};
use ras_core::fitness::{eval_seed, evaluate, EvalContext, EvalFailure, FitnessReport};
use ras_core::genome::{GeneId, GenePool, PoolSnapshot};
use ras_core::graph::{compile, dump, TensorShape};

use crate::config::RunConfig;
use crate::victims::{train_victim, VictimKind};

/// Sidecar path convention: the clean images live next to the bank.
pub fn sidecar_path(bank: &Path) -> std::path::PathBuf {
    let mut name = bank.file_name().unwrap_or_default().to_os_string();
    name.push(".clean");
    bank.with_file_name(name)
}

/// Parses `l0:1,linf:10` style spec lists.
pub fn parse_specs(text: &str) -> Result<Vec<AttackSpec>> {
    let mut specs = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let Some((norm, th)) = part.split_once(':') else {
            bail!("attack spec {part:?} is not of the form norm:th");
        };
        let norm = match norm.trim().to_ascii_lowercase().as_str() {
            "l0" => AttackNorm::L0,
            "linf" => AttackNorm::Linf,
            other => bail!("unknown norm {other:?}, expected l0 or linf"),
        };
        let th: u8 = th.trim().parse().context("threshold must be an integer")?;
        if ![1, 3, 5, 10].contains(&th) {
            bail!("threshold {th} outside the supported set {{1, 3, 5, 10}}");
        }
        specs.push(AttackSpec::new(norm, th));
    }
    if specs.is_empty() {
        bail!("no attack specs given");
    }
    Ok(specs)
}

pub struct BankSummary {
    pub victims: Vec<(VictimKind, f64)>,
    pub records: usize,
}

/// Trains the requested victims, attacks the test set and writes the bank
/// plus its clean-image sidecar.
pub fn build_bank_command(
    config: &RunConfig,
    victims: &[VictimKind],
    specs: &[AttackSpec],
    quota: usize,
    max_candidates: Option<usize>,
    victim_epochs: usize,
    out: &Path,
) -> Result<BankSummary> {
    let data = config.load_dataset()?;
    let mut trained = Vec::new();
    let mut summary = Vec::new();
    for (i, &kind) in victims.iter().enumerate() {
        let seed = config.seed ^ 0x7653 ^ ((i as u64 + 1) << 17);
        let victim = train_victim(kind, &data, &config.train, victim_epochs, seed)?;
        summary.push((kind, victim.test_accuracy));
        trained.push(victim.model);
    }
    let (bank, clean) = build_bank(&trained, &data.test, specs, quota, max_candidates, config.seed);
    write_bank(&bank, out)?;
    let sidecar = bank.with_images(&clean);
    write_bank(&sidecar, &sidecar_path(out))?;
    // paranoia pass over what just hit the disk
    let reread = read_bank(out)?;
    let reread_clean = read_bank(&sidecar_path(out))?;
    verify_bank(&reread, &reread_clean)?;
    Ok(BankSummary {
        victims: summary,
        records: bank.len(),
    })
}

/// Loads a genome snapshot and resolves which model to use. A `--model-id`
/// that the snapshot does not contain is not rejected here: it surfaces
/// downstream as a compile failure, which evaluation maps to a zero
/// fitness report.
pub fn load_genome(path: &Path, model_id: Option<u64>) -> Result<(GenePool, GeneId)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading genome snapshot {}", path.display()))?;
    let snapshot: PoolSnapshot = serde_json::from_str(&text)
        .with_context(|| format!("parsing genome snapshot {}", path.display()))?;
    let pool = GenePool::from_snapshot(&snapshot)?;
    let id = match model_id {
        Some(id) => GeneId(id),
        None => {
            let ids = pool.model_ids();
            match ids.as_slice() {
                [only] => *only,
                [] => bail!("snapshot contains no models"),
                many => bail!(
                    "snapshot contains {} models ({:?}); pass --model-id",
                    many.len(),
                    many
                ),
            }
        }
    };
    Ok((pool, id))
}

#[derive(Debug, serde::Serialize)]
pub struct EvaluateOneOutput {
    pub model: GeneId,
    #[serde(flatten)]
    pub report: FitnessReport,
    pub param_count: Option<u64>,
    pub failure: Option<String>,
}

/// Compiles, trains and scores a single genome snapshot against the
/// configured dataset and bank. Compile failures yield a zero report, not
/// an error.
pub fn evaluate_one(
    config: &RunConfig,
    genome_path: &Path,
    model_id: Option<u64>,
    generation: u64,
) -> Result<EvaluateOneOutput> {
    let (pool, id) = load_genome(genome_path, model_id)?;
    let data = config.load_dataset()?;
    let bank = read_bank(&config.bank_path)
        .with_context(|| format!("reading bank {}", config.bank_path.display()))?;
    let ctx = EvalContext::new(data.train, bank, config.schedule, config.train.clone());
    let seed = eval_seed(config.seed, generation, id);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let (report, failure, _) = evaluate(&pool, id, &ctx, generation, &mut rng);
    let param_count = compile(&pool, id, ctx.input_shape, ctx.n_classes)
        .ok()
        .map(|g| g.param_count);
    Ok(EvaluateOneOutput {
        model: id,
        report,
        param_count,
        failure: failure.map(|f| match f {
            EvalFailure::Compile(m) => format!("compile: {m}"),
            EvalFailure::TrainingAborted => "training aborted".into(),
        }),
    })
}

/// Text and optional JSON dump of a compiled genome.
pub fn compile_dump(
    genome_path: &Path,
    model_id: Option<u64>,
    input: TensorShape,
    n_classes: usize,
    json: bool,
) -> Result<String> {
    let (pool, id) = load_genome(genome_path, model_id)?;
    let graph = compile(&pool, id, input, n_classes)?;
    if json {
        Ok(serde_json::to_string_pretty(&graph).expect("graph serializes"))
    } else {
        Ok(dump(&graph))
    }
}

/// Parses `8x8x3` style shape strings.
pub fn parse_shape(text: &str) -> Result<TensorShape> {
    let parts: Vec<&str> = text.split('x').collect();
    if parts.len() != 3 {
        bail!("input shape must be HxWxC, got {text:?}");
    }
    Ok(TensorShape::Spatial {
        h: parts[0].parse().context("bad height")?,
        w: parts[1].parse().context("bad width")?,
        c: parts[2].parse().context("bad channels")?,
    })
}
