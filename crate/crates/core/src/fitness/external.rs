//! External-evaluator escape hatch: genomes go out over a line-delimited
//! protocol on a child process's standard streams, fitness reports come
//! back. One request per line, one response line per request.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EvalResult, EvalSchedule, Evaluator, FitnessError, FitnessReport};
use crate::genome::{GeneId, GenePool, PoolSnapshot};
use crate::graph::TensorShape;

/// Wire form of one evaluation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub genome: PoolSnapshot,
    pub model_id: GeneId,
    pub input_shape: TensorShape,
    pub n_classes: usize,
    pub schedule: EvalSchedule,
    pub generation: u64,
    pub seed: u64,
    pub bank_path: String,
}

/// Wire form of one evaluation response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResponse {
    pub accuracy: f64,
    pub robustness: f64,
    pub train_epochs_used: usize,
}

#[derive(Debug, Error)]
pub enum ExternalError {
    #[error("evaluator process could not start: {0}")]
    Spawn(std::io::Error),
    #[error("evaluator pipe closed")]
    PipeClosed,
    #[error("evaluator timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone)]
pub struct ExternalEvaluatorConfig {
    /// Command and arguments of the evaluator process.
    pub command: Vec<String>,
    pub timeout: Duration,
    pub bank_path: PathBuf,
    pub input_shape: TensorShape,
    pub n_classes: usize,
    pub schedule: EvalSchedule,
}

struct ChildHandle {
    child: Child,
    stdin: std::process::ChildStdin,
    lines: mpsc::Receiver<std::io::Result<String>>,
}

impl ChildHandle {
    fn spawn(command: &[String]) -> Result<Self, ExternalError> {
        let mut child = Command::new(&command[0])
            .args(&command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(ExternalError::Spawn)?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let reader = std::io::BufReader::new(stdout);
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ChildHandle {
            child,
            stdin,
            lines: rx,
        })
    }

    fn round_trip(&mut self, line: &str, timeout: Duration) -> Result<String, ExternalError> {
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.write_all(b"\n"))
            .and_then(|_| self.stdin.flush())
            .map_err(|_| ExternalError::PipeClosed)?;
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(_)) | Err(mpsc::RecvTimeoutError::Disconnected) => {
                Err(ExternalError::PipeClosed)
            }
            Err(mpsc::RecvTimeoutError::Timeout) => Err(ExternalError::Timeout(timeout)),
        }
    }
}

impl Drop for ChildHandle {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Sends one request to a fresh child of `cfg.command` and parses the
/// response line into a fitness report.
pub fn external_evaluate(
    cfg: &ExternalEvaluatorConfig,
    request: &EvalRequest,
) -> Result<FitnessReport, ExternalError> {
    let mut child = ChildHandle::spawn(&cfg.command)?;
    round_trip_request(&mut child, cfg, request)
}

fn round_trip_request(
    child: &mut ChildHandle,
    cfg: &ExternalEvaluatorConfig,
    request: &EvalRequest,
) -> Result<FitnessReport, ExternalError> {
    let line = serde_json::to_string(request).expect("requests serialize");
    let reply = child.round_trip(&line, cfg.timeout)?;
    let response: EvalResponse =
        serde_json::from_str(&reply).map_err(|e| ExternalError::Malformed(e.to_string()))?;
    Ok(FitnessReport::new(
        response.accuracy,
        response.robustness,
        response.train_epochs_used,
        cfg.schedule.mode_for(request.generation),
    ))
}

/// Evaluator backed by a child process. The child is kept alive across
/// requests and respawned after pipe errors; a request that still fails
/// yields a zero report with the failure attached, never an error that
/// would stall evolution.
pub struct ExternalEvaluator {
    cfg: ExternalEvaluatorConfig,
    base_seed: u64,
    child: Mutex<Option<ChildHandle>>,
}

impl ExternalEvaluator {
    pub fn new(cfg: ExternalEvaluatorConfig, base_seed: u64) -> Self {
        ExternalEvaluator {
            cfg,
            base_seed,
            child: Mutex::new(None),
        }
    }
}

impl Evaluator for ExternalEvaluator {
    fn evaluate_model(
        &self,
        pool: &GenePool,
        model: GeneId,
        generation: u64,
    ) -> Result<EvalResult, FitnessError> {
        let snapshot = pool
            .extract_model(model)
            .map_err(|e| FitnessError::Evaluator(e.to_string()))?;
        let request = EvalRequest {
            genome: snapshot,
            model_id: model,
            input_shape: self.cfg.input_shape,
            n_classes: self.cfg.n_classes,
            schedule: self.cfg.schedule,
            generation,
            seed: super::eval_seed(self.base_seed, generation, model),
            bank_path: self.cfg.bank_path.display().to_string(),
        };
        let mut guard = self.child.lock().expect("child lock");
        if guard.is_none() {
            match ChildHandle::spawn(&self.cfg.command) {
                Ok(c) => *guard = Some(c),
                Err(e) => {
                    return Ok(EvalResult {
                        report: FitnessReport::zero(self.cfg.schedule.mode_for(generation)),
                        cached: false,
                        failure: Some(e.to_string()),
                    })
                }
            }
        }
        let result = round_trip_request(guard.as_mut().expect("spawned"), &self.cfg, &request);
        match result {
            Ok(report) => Ok(EvalResult {
                report,
                cached: false,
                failure: None,
            }),
            Err(e) => {
                // drop the wedged child so the next request respawns
                *guard = None;
                Ok(EvalResult {
                    report: FitnessReport::zero(self.cfg.schedule.mode_for(generation)),
                    cached: false,
                    failure: Some(e.to_string()),
                })
            }
        }
    }
}
