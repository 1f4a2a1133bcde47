//! `ras`: evolutionary search for architectures that stay accurate on
//! transferred adversarial samples.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ras_cli::commands::{
    build_bank_command, compile_dump, evaluate_one, parse_shape, parse_specs, sidecar_path,
};
use ras_cli::config::RunConfig;
use ras_cli::victims::VictimKind;

#[derive(Parser)]
#[command(name = "ras", version, about = "robust architecture search runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (structured text); defaults apply when
    /// omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the generation count.
    #[arg(long)]
    generations: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the bank path.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Override the worker count.
    #[arg(long)]
    parallelism: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(generations) = self.generations {
            config.generations = generations;
        }
        if let Some(out_dir) = &self.out_dir {
            config.out_dir = out_dir.clone();
        }
        if let Some(bank) = &self.bank {
            config.bank_path = bank.clone();
        }
        if let Some(parallelism) = self.parallelism {
            config.parallelism = parallelism;
            if parallelism > 1 {
                config.serial_deterministic = false;
            }
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) an evolution experiment.
    Evolve {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from a checkpoint file written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train victims and build the adversarial sample bank.
    AttackBank {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated victim kinds (cnn, dense).
        #[arg(long, default_value = "cnn,dense")]
        victims: String,
        /// Comma-separated attack specs, norm:th.
        #[arg(long, default_value = "l0:1,l0:3,l0:5,l0:10,linf:1,linf:3,linf:5,linf:10")]
        specs: String,
        /// Success quota per victim and spec.
        #[arg(long, default_value_t = 10)]
        quota: usize,
        /// Cap on attacked candidates per victim and spec; 0 means the
        /// whole correctly classified test set.
        #[arg(long, default_value_t = 0)]
        max_candidates: usize,
        /// Training epochs for each victim.
        #[arg(long, default_value_t = 6)]
        victim_epochs: usize,
        /// Output bank path; the clean sidecar lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one genome snapshot and print its fitness report.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Genome snapshot file (pool snapshot with the model's closure).
        #[arg(long)]
        genome: PathBuf,
        /// Model id inside the snapshot; required when it holds several.
        #[arg(long)]
        model_id: Option<u64>,
        /// Generation index controlling full-set versus subset mode.
        #[arg(long, default_value_t = 0)]
        generation: u64,
    },
    /// Compile a genome and dump the computation graph.
    Compile {
        /// Genome snapshot file.
        #[arg(long)]
        genome: PathBuf,
        #[arg(long)]
        model_id: Option<u64>,
        /// Input shape HxWxC.
        #[arg(long, default_value = "8x8x3")]
        input: String,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Emit the machine-readable form instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Export the stats table from a run directory's event log.
    Stats {
        /// Run directory containing events.jsonl.
        #[arg(long)]
        run_dir: PathBuf,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve fitness evaluations over stdin/stdout (one request per line).
    EvalServer {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let payload = serde_json::json!({
            "error": { "message": format!("{err:#}") }
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Evolve { config, resume } => {
            let config = config.resolve()?;
            let report = ras_cli::run_evolve(&config, resume.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::AttackBank {
            config,
            victims,
            specs,
            quota,
            max_candidates,
            victim_epochs,
            out,
        } => {
            let config = config.resolve()?;
            let victims: Vec<VictimKind> = victims
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(str::parse)
                .collect::<Result<_>>()?;
            let specs = parse_specs(&specs)?;
            let cap = (max_candidates > 0).then_some(max_candidates);
            let summary =
                build_bank_command(&config, &victims, &specs, quota, cap, victim_epochs, &out)?;
            for (kind, accuracy) in &summary.victims {
                eprintln!("victim {kind}: test accuracy {accuracy:.3}");
            }
            println!(
                "{}",
                serde_json::json!({
                    "bank": out,
                    "sidecar": sidecar_path(&out),
                    "records": summary.records,
                })
            );
        }
        Command::Evaluate {
            config,
            genome,
            model_id,
            generation,
        } => {
            let config = config.resolve()?;
            let output = evaluate_one(&config, &genome, model_id, generation)?;
            println!("{}", serde_json::to_string_pretty(&output)?);
        }
        Command::Compile {
            genome,
            model_id,
            input,
            classes,
            json,
        } => {
            let shape = parse_shape(&input)?;
            print!("{}", compile_dump(&genome, model_id, shape, classes, json)?);
        }
        Command::Stats { run_dir, out } => {
            let csv = ras_cli::stats::export_stats(&run_dir)?;
            match out {
                Some(path) => std::fs::write(&path, csv)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::EvalServer { config } => {
            let config = config.resolve()?;
            let stdin = std::io::stdin();
            let served =
                ras_cli::eval_server::serve(&config, stdin.lock(), std::io::stdout())?;
            eprintln!("served {served} evaluations");
        }
    }
    Ok(())
}
