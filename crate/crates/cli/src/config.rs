//! Run configuration: one structured text file plus flag overrides. The
//! config hash is embedded in every artifact for provenance.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ras_core::dataset::{load_cifar10, CifarOptions, DataPair, SyntheticConfig};
use ras_core::fitness::EvalSchedule;
use ras_core::genome::PoolCaps;
use ras_core::nn::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Cifar10Binary,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Directory holding the CIFAR-10 binary batches.
    pub path: Option<PathBuf>,
    /// Seeded subset size per split (CIFAR only).
    pub subset: Option<usize>,
    /// Center-crop edge length (CIFAR only).
    pub downscale: Option<usize>,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DatasetSource::Synthetic,
            path: None,
            subset: None,
            downscale: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub generations: u64,
    pub population: usize,
    pub caps: PoolCaps,
    pub schedule: EvalSchedule,
    pub dataset: DatasetConfig,
    pub bank_path: PathBuf,
    pub train: TrainConfig,
    /// Worker threads for fitness evaluation. Above one, generations run
    /// in batched-parallel mode.
    pub parallelism: usize,
    /// Forces the single-worker normative procedure regardless of
    /// `parallelism`; required for bitwise replay.
    pub serial_deterministic: bool,
    /// Min-max scale spectrum features before niching distance.
    pub normalize_spectrum: bool,
    /// Score robustness only over bank samples the model classifies
    /// correctly clean (reads the bank's `.clean` sidecar). Off by
    /// default: the denominator is the whole bank.
    pub clean_correct_denominator: bool,
    pub archive_size: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            generations: 20,
            population: 25,
            caps: PoolCaps::default(),
            schedule: EvalSchedule {
                full_every: 10,
                full_epochs: 10,
                subset_size: 500,
                subset_epochs: 5,
            },
            dataset: DatasetConfig::default(),
            bank_path: PathBuf::from("bank.rasb"),
            train: TrainConfig::default(),
            parallelism: 1,
            serial_deterministic: true,
            normalize_spectrum: false,
            clean_correct_denominator: false,
            archive_size: 5,
            out_dir: PathBuf::from("ras-out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Provenance hash over the canonical JSON form. Run length and the
    /// output directory are excluded so a checkpoint can extend a run or
    /// be replayed elsewhere; everything defining the experiment (seed,
    /// populations, schedule, dataset, training, execution mode) counts.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            generations: 0,
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let canonical = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        hex_string(&digest)
    }

    /// Checks the invariants that must hold before a run starts.
    pub fn validate_for_run(&self) -> Result<()> {
        if self.population < 2 {
            bail!("population must be at least 2, got {}", self.population);
        }
        if self.schedule.full_every == 0 {
            bail!("schedule.full_every must be at least 1");
        }
        if self.train.max_epochs == 0 || self.train.early_stop_patience == 0 {
            bail!("train.max_epochs and train.early_stop_patience must be at least 1");
        }
        if self.train.early_stop_delta < 0.0 {
            bail!("train.early_stop_delta must be non-negative");
        }
        if !self.bank_path.exists() {
            bail!("bank file {} does not exist", self.bank_path.display());
        }
        if let DatasetSource::Cifar10Binary = self.dataset.source {
            let Some(path) = &self.dataset.path else {
                bail!("dataset.path is required for the cifar10_binary source");
            };
            if !path.exists() {
                bail!("dataset path {} does not exist", path.display());
            }
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<DataPair> {
        match self.dataset.source {
            DatasetSource::Synthetic => Ok(ras_core::dataset::synthetic(
                &self.dataset.synthetic,
                self.seed,
            )),
            DatasetSource::Cifar10Binary => {
                let path = self
                    .dataset
                    .path
                    .as_ref()
                    .context("dataset.path is required for cifar10_binary")?;
                let opts = CifarOptions {
                    subset: self.dataset.subset,
                    downscale: self.dataset.downscale,
                    seed: self.seed,
                };
                Ok(load_cifar10(path, &opts)?)
            }
        }
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
