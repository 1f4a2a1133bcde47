//! Run event log: one structured record per line, used for replay,
//! debugging and stats export.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genome::{GeneId, Spectrum};
use crate::mutation::MutationRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStat {
    pub model: GeneId,
    pub accuracy: f64,
    pub robustness: f64,
    pub fitness: f64,
    pub spectrum: Spectrum,
}

/// Per-generation population statistics: fitness aggregates, the mean
/// structural features of the representatives, and the population mean of
/// all ten spectrum features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: u64,
    pub mean_fitness: f64,
    pub max_fitness: f64,
    pub mean_accuracy: f64,
    pub mean_robustness: f64,
    pub mean_blocks: f64,
    pub mean_layers: f64,
    pub mean_block_conns: f64,
    pub mean_layer_conns: f64,
    pub mean_layers_per_block: f64,
    pub mean_conns_per_block: f64,
    pub mean_spectrum: [f64; 10],
    pub clusters: Vec<ClusterStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    RunStarted {
        config_hash: String,
        seed: u64,
        population: usize,
        generations: u64,
    },
    Mutation {
        generation: u64,
        #[serde(flatten)]
        record: MutationRecord,
    },
    ModelEvaluated {
        generation: u64,
        model: GeneId,
        accuracy: f64,
        robustness: f64,
        fitness: f64,
        train_epochs_used: usize,
        eval_mode: String,
        cached: bool,
    },
    CompileFailed {
        generation: u64,
        model: GeneId,
        message: String,
    },
    EvalFailed {
        generation: u64,
        model: GeneId,
        message: String,
    },
    ChildDiscarded {
        generation: u64,
        child: GeneId,
        reason: String,
    },
    Replaced {
        generation: u64,
        cluster_index: usize,
        old: GeneId,
        new: GeneId,
    },
    MutationExhausted {
        generation: u64,
        parent: GeneId,
    },
    GcRun {
        generation: u64,
        removed_layers: usize,
        removed_blocks: usize,
    },
    GenerationStats(GenerationStats),
}

/// Destination for run events. The trait keeps evolution code independent
/// of where events go; tests use the in-memory sink.
pub trait EventSink {
    fn record(&mut self, event: &Event);
}

/// Drops everything.
pub struct NullSink;

impl EventSink for NullSink {
    fn record(&mut self, _event: &Event) {}
}

/// Collects events in memory.
#[derive(Default)]
pub struct MemorySink(pub Vec<Event>);

impl EventSink for MemorySink {
    fn record(&mut self, event: &Event) {
        self.0.push(event.clone());
    }
}

/// Appends events to a file as line-delimited records, flushing per line
/// so checkpoints can record exact byte offsets.
pub struct FileSink {
    writer: std::io::BufWriter<std::fs::File>,
    offset: u64,
}

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("io error on event log: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

impl FileSink {
    pub fn create(path: &Path) -> Result<Self, EventLogError> {
        let file = std::fs::File::create(path)?;
        Ok(FileSink {
            writer: std::io::BufWriter::new(file),
            offset: 0,
        })
    }

    /// Opens an existing log truncated to `offset` bytes, the resume path.
    pub fn append_at(path: &Path, offset: u64) -> Result<Self, EventLogError> {
        let file = std::fs::OpenOptions::new().read(true).write(true).open(path)?;
        file.set_len(offset)?;
        let mut file = file;
        use std::io::Seek;
        file.seek(std::io::SeekFrom::End(0))?;
        Ok(FileSink {
            writer: std::io::BufWriter::new(file),
            offset,
        })
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn write(&mut self, event: &Event) -> Result<(), EventLogError> {
        let line = serde_json::to_string(event).expect("events serialize");
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        self.offset += line.len() as u64 + 1;
        Ok(())
    }
}

impl EventSink for FileSink {
    fn record(&mut self, event: &Event) {
        self.write(event).expect("event log write");
    }
}

/// Reads a full event log, reporting the offending line on corruption.
pub fn read_log(path: &Path) -> Result<Vec<Event>, EventLogError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(
            serde_json::from_str(&line).map_err(|source| EventLogError::Parse {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(events)
}
