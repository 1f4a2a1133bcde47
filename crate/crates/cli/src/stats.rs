//! Stats table writing and export from the event log.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

use ras_core::events::{read_log, Event, GenerationStats};

pub const STATS_HEADER: &str = "generation,mean_fitness,max_fitness,mean_accuracy,\
mean_robustness,mean_blocks,mean_layers,mean_block_connections,mean_layer_connections,\
mean_layers_per_block,mean_connections_per_block";

pub fn stats_row(s: &GenerationStats) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        s.generation,
        s.mean_fitness,
        s.max_fitness,
        s.mean_accuracy,
        s.mean_robustness,
        s.mean_blocks,
        s.mean_layers,
        s.mean_block_conns,
        s.mean_layer_conns,
        s.mean_layers_per_block,
        s.mean_conns_per_block
    )
}

/// Append-only stats file with byte-offset tracking for checkpoint resume.
pub struct StatsWriter {
    file: std::fs::File,
    offset: u64,
}

impl StatsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)
            .with_context(|| format!("creating stats file {}", path.display()))?;
        let header = format!("{STATS_HEADER}\n");
        file.write_all(header.as_bytes())?;
        file.flush()?;
        Ok(StatsWriter {
            file,
            offset: header.len() as u64,
        })
    }

    /// Reopens an existing stats file truncated to `offset` bytes.
    pub fn append_at(path: &Path, offset: u64) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .read(true)
            .write(true)
            .open(path)
            .with_context(|| format!("opening stats file {}", path.display()))?;
        file.set_len(offset)?;
        let mut file = file;
        use std::io::Seek;
        file.seek(std::io::SeekFrom::End(0))?;
        Ok(StatsWriter { file, offset })
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn write_row(&mut self, stats: &GenerationStats) -> Result<()> {
        let line = format!("{}\n", stats_row(stats));
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        self.offset += line.len() as u64;
        Ok(())
    }
}

/// Rebuilds the stats table from a run directory's event log. Produces
/// exactly the rows the live run wrote, one per generation.
pub fn export_stats(run_dir: &Path) -> Result<String> {
    let events = read_log(&run_dir.join("events.jsonl"))
        .with_context(|| format!("reading event log in {}", run_dir.display()))?;
    let mut out = String::from(STATS_HEADER);
    out.push('\n');
    for event in &events {
        if let Event::GenerationStats(s) = event {
            out.push_str(&stats_row(s));
            out.push('\n');
        }
    }
    Ok(out)
}
