//! Reference implementation of the external-evaluator side of the wire
//! protocol: reads one request per line on stdin, evaluates in process,
//! writes one response per line on stdout. Other evaluator
//! implementations only need to speak this format.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ras_core::attacks::{read_bank, AdversarialBank};
use ras_core::fitness::{evaluate, EvalContext, EvalRequest, EvalResponse};
use ras_core::genome::GenePool;

use crate::config::RunConfig;

/// Serves evaluations until stdin closes. The dataset comes from the
/// server's own config; schedule, seed and bank path arrive per request.
pub fn serve(config: &RunConfig, input: impl BufRead, mut output: impl Write) -> Result<u64> {
    let data = config.load_dataset()?;
    let mut banks: HashMap<PathBuf, AdversarialBank> = HashMap::new();
    let mut served = 0u64;
    for line in input.lines() {
        let line = line.context("reading request line")?;
        if line.trim().is_empty() {
            continue;
        }
        let request: EvalRequest =
            serde_json::from_str(&line).context("parsing evaluation request")?;
        let bank_path = PathBuf::from(&request.bank_path);
        if !banks.contains_key(&bank_path) {
            let bank = read_bank(&bank_path)
                .with_context(|| format!("reading bank {}", bank_path.display()))?;
            banks.insert(bank_path.clone(), bank);
        }
        let pool = GenePool::from_snapshot(&request.genome)?;
        let ctx = EvalContext::new(
            data.train.clone(),
            banks[&bank_path].clone(),
            request.schedule,
            config.train.clone(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
        let (report, _failure, _) =
            evaluate(&pool, request.model_id, &ctx, request.generation, &mut rng);
        let response = EvalResponse {
            accuracy: report.accuracy,
            robustness: report.robustness,
            train_epochs_used: report.train_epochs_used,
        };
        let line = serde_json::to_string(&response).expect("responses serialize");
        output.write_all(line.as_bytes())?;
        output.write_all(b"\n")?;
        output.flush()?;
        served += 1;
    }
    Ok(served)
}
