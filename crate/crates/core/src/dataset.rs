//! Image classification datasets: the CIFAR-10 binary format and a seeded
//! synthetic generator for fast desk-scale runs.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::TensorShape;
use crate::nn::Tensor;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: truncated record at sample {index}")]
    Truncated { path: String, index: usize },
    #[error("subset size {requested} exceeds {available} samples")]
    SubsetTooLarge { requested: usize, available: usize },
}

/// A labelled image set. Images are 32-bit floats in `[0, 1]`,
/// channel-major per sample.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub shape: TensorShape,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.shape.elements()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.images[i * len..(i + 1) * len]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Gathers the given samples into a batch tensor plus label vector.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.label(i));
        }
        let dims = match self.shape {
            TensorShape::Spatial { h, w, c } => vec![indices.len(), c, h, w],
            TensorShape::Flat { n } => vec![indices.len(), n],
        };
        (Tensor::from_vec(dims, data), labels)
    }
}

/// Train and test splits of one source.
#[derive(Debug, Clone)]
pub struct DataPair {
    pub train: Dataset,
    pub test: Dataset,
}

/// Shuffled train/validation index split over `n` samples. The validation
/// side gets `ceil(n * val_frac)` samples, at least one of each side when
/// possible.
pub fn split_train_val<R: Rng>(n: usize, val_frac: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64 * val_frac).ceil() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Parameters of the synthetic Gaussian-blob generator. Every class is a
/// colored blob at a class-specific position. `ambiguity` draws each
/// sample part-way toward a neighboring class prototype in both position
/// and color, which is what creates genuinely overlapping classes: pixel
/// noise alone averages out under convolution and leaves victims both
/// perfect and unattackable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    /// Upper bound of the per-sample interpolation toward a neighbor
    /// class, in [0, 1). Near 0.5 a slice of samples is intrinsically
    /// borderline.
    pub ambiguity: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            height: 8,
            width: 8,
            n_classes: 3,
            train_per_class: 200,
            test_per_class: 60,
            noise: 0.15,
            ambiguity: 0.5,
        }
    }
}

const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.25, 0.25],
    [0.25, 1.0, 0.25],
    [0.25, 0.25, 1.0],
    [1.0, 1.0, 0.25],
    [1.0, 0.25, 1.0],
    [0.25, 1.0, 1.0],
    [0.9, 0.6, 0.2],
    [0.6, 0.6, 0.6],
];

/// Generates a seeded blob dataset (3 channels). Deterministic per seed.
pub fn synthetic(cfg: &SyntheticConfig, seed: u64) -> DataPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = synthetic_split(cfg, cfg.train_per_class, &mut rng);
    let test = synthetic_split(cfg, cfg.test_per_class, &mut rng);
    DataPair { train, test }
}

fn class_prototype(cfg: &SyntheticConfig, class: usize) -> (f64, f64, [f64; 3]) {
    let (h, w, k) = (cfg.height, cfg.width, cfg.n_classes);
    let radius = 0.28 * h.min(w) as f64;
    let angle = std::f64::consts::TAU * class as f64 / k as f64;
    let cy = h as f64 / 2.0 + radius * angle.sin();
    let cx = w as f64 / 2.0 + radius * angle.cos();
    (cy, cx, PALETTE[class % PALETTE.len()])
}

fn synthetic_split<R: Rng>(cfg: &SyntheticConfig, per_class: usize, rng: &mut R) -> Dataset {
    let (h, w, k) = (cfg.height, cfg.width, cfg.n_classes);
    let sample_len = 3 * h * w;
    let n = per_class * k;
    let mut images = vec![0f32; n * sample_len];
    let mut labels = vec![0u8; n];
    let sigma = 0.22 * h.min(w) as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for (slot, &i) in order.iter().enumerate() {
        let class = slot % k;
        labels[i] = class as u8;
        let (cy, cx, color) = class_prototype(cfg, class);
        // draw the sample part-way toward a random neighbor class
        let neighbor = if rng.gen_bool(0.5) { class + 1 } else { class + k - 1 } % k;
        let (ny, nx, ncolor) = class_prototype(cfg, neighbor);
        let lambda = if k > 1 { rng.gen_range(0.0..cfg.ambiguity) } else { 0.0 };
        let cy = cy + (ny - cy) * lambda + rng.gen_range(-0.5..0.5);
        let cx = cx + (nx - cx) * lambda + rng.gen_range(-0.5..0.5);
        let base = i * sample_len;
        for ch in 0..3 {
            let mixed = color[ch] + (ncolor[ch] - color[ch]) * lambda;
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 + 0.5 - cy;
                    let dx = x as f64 + 0.5 - cx;
                    let blob = 0.9 * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                    let noise: f64 = rng.gen_range(-1.0..1.0) * cfg.noise;
                    let v = (blob * mixed + noise).clamp(0.0, 1.0);
                    images[base + (ch * h + y) * w + x] = v as f32;
                }
            }
        }
    }
    Dataset {
        images,
        labels,
        shape: TensorShape::Spatial { h, w, c: 3 },
        n_classes: k,
    }
}

const CIFAR_DIM: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_DIM * CIFAR_DIM;

/// Options for CIFAR-10 ingestion: an optional seeded subset per split and
/// an optional center crop to `downscale x downscale` pixels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CifarOptions {
    pub subset: Option<usize>,
    pub downscale: Option<usize>,
    pub seed: u64,
}

/// Loads the CIFAR-10 binary batches (`data_batch_1..5.bin`,
/// `test_batch.bin`): 3073-byte records of one label byte plus 3072
/// channel-major pixel bytes.
pub fn load_cifar10(dir: &Path, opts: &CifarOptions) -> Result<DataPair, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let train_files: Vec<std::path::PathBuf> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    let train = load_cifar_files(&train_files, opts, &mut rng)?;
    let test = load_cifar_files(&[dir.join("test_batch.bin")], opts, &mut rng)?;
    Ok(DataPair { train, test })
}

fn load_cifar_files<R: Rng>(
    paths: &[std::path::PathBuf],
    opts: &CifarOptions,
    rng: &mut R,
) -> Result<Dataset, DatasetError> {
    let mut raw: Vec<u8> = Vec::new();
    for path in paths {
        let mut file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        file.read_to_end(&mut raw).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    let n_total = raw.len() / CIFAR_RECORD;
    if !raw.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DatasetError::Truncated {
            path: paths.last().unwrap().display().to_string(),
            index: n_total,
        });
    }
    let mut indices: Vec<usize> = (0..n_total).collect();
    if let Some(subset) = opts.subset {
        if subset > n_total {
            return Err(DatasetError::SubsetTooLarge {
                requested: subset,
                available: n_total,
            });
        }
        indices.shuffle(rng);
        indices.truncate(subset);
        indices.sort_unstable();
    }

    let dim = opts.downscale.unwrap_or(CIFAR_DIM).min(CIFAR_DIM);
    let offset = (CIFAR_DIM - dim) / 2;
    let sample_len = 3 * dim * dim;
    let mut images = Vec::with_capacity(indices.len() * sample_len);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in &indices {
        let rec = &raw[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        labels.push(rec[0]);
        let pixels = &rec[1..];
        for ch in 0..3 {
            for y in 0..dim {
                for x in 0..dim {
                    let src = (ch * CIFAR_DIM + y + offset) * CIFAR_DIM + x + offset;
                    images.push(pixels[src] as f32 / 255.0);
                }
            }
        }
    }
    Ok(Dataset {
        images,
        labels,
        shape: TensorShape::Spatial { h: dim, w: dim, c: 3 },
        n_classes: 10,
    })
}
