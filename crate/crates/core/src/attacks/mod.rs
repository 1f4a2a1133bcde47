//! Black-box adversarial attacks and the persistent sample bank.
//!
//! Attacks run differential evolution against a victim's soft-label
//! output, minimizing the confidence of the true class inside an L0 or
//! L-infinity constraint until the argmax flips. Successful samples are
//! appended to a binary bank that later scores the robustness of evolved
//! architectures by transfer.

mod bank;
mod de;

pub use bank::{read_bank, verify_bank, write_bank, AdversarialBank, BankError, BankHeader,
               BankRecord};
pub use de::{de_minimize, DeConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::TensorShape;

/// Perturbation norms of the dual-quality assessment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackNorm {
    /// At most `th` pixels modified.
    L0,
    /// Every channel moves at most `th`/255.
    Linf,
}

impl AttackNorm {
    pub fn tag(self) -> u8 {
        match self {
            AttackNorm::L0 => 0,
            AttackNorm::Linf => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(AttackNorm::L0),
            1 => Some(AttackNorm::Linf),
            _ => None,
        }
    }
}

/// Black-box optimizer used for the attack. CMA-ES shares the tag space
/// but is produced by other tooling; this crate runs DE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackOptimizer {
    De,
}

impl AttackOptimizer {
    pub fn tag(self) -> u8 {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub population: usize,
    pub iterations: usize,
}

impl Default for AttackBudget {
    fn default() -> Self {
        AttackBudget {
            population: 40,
            iterations: 100,
        }
    }
}

/// One attack configuration: norm, threshold, optimizer and budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub norm: AttackNorm,
    pub th: u8,
    pub optimizer: AttackOptimizer,
    pub budget: AttackBudget,
}

impl AttackSpec {
    pub fn new(norm: AttackNorm, th: u8) -> Self {
        AttackSpec {
            norm,
            th,
            optimizer: AttackOptimizer::De,
            budget: AttackBudget::default(),
        }
    }
}

/// Soft-label classifier under attack. Queries are black-box: the attack
/// sees class probabilities only.
pub trait SoftClassifier: Sync {
    fn n_classes(&self) -> usize;
    fn input_shape(&self) -> TensorShape;
    /// Probabilities for `n` flattened images, row-major `[n, classes]`.
    fn predict_probs_batch(&self, images: &[f32], n: usize) -> Vec<f32>;

    fn classify(&self, image: &[f32]) -> usize {
        let probs = self.predict_probs_batch(image, 1);
        argmax(&probs)
    }
}

impl SoftClassifier for crate::nn::TrainedModel {
    fn n_classes(&self) -> usize {
        self.n_classes()
    }

    fn input_shape(&self) -> TensorShape {
        self.input_shape()
    }

    fn predict_probs_batch(&self, images: &[f32], n: usize) -> Vec<f32> {
        crate::nn::TrainedModel::predict_probs_batch(self, images, n)
    }
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Search-space box bounds for a spec on the given image geometry.
///
/// L0 encodes `th` pixel tuples `(x, y, r, g, b)`; the replacement color is
/// free in `[0, 1]`. Linf encodes a full-image additive perturbation with
/// each component in `[-th/255, th/255]`.
pub fn encode_perturbation(spec: &AttackSpec, shape: TensorShape) -> Vec<(f32, f32)> {
    let TensorShape::Spatial { h, w, c } = shape else {
        panic!("attacks operate on spatial images");
    };
    match spec.norm {
        AttackNorm::L0 => {
            let mut bounds = Vec::with_capacity(spec.th as usize * (2 + c));
            for _ in 0..spec.th {
                bounds.push((0.0, w as f32));
                bounds.push((0.0, h as f32));
                for _ in 0..c {
                    bounds.push((0.0, 1.0));
                }
            }
            bounds
        }
        AttackNorm::Linf => {
            let eps = spec.th as f32 / 255.0;
            vec![(-eps, eps); h * w * c]
        }
    }
}

/// Applies a decoded genome to a clean image, clipping to `[0, 1]`.
pub fn decode_perturbation(
    spec: &AttackSpec,
    shape: TensorShape,
    clean: &[f32],
    genome: &[f32],
) -> Vec<f32> {
    let TensorShape::Spatial { h, w, c } = shape else {
        panic!("attacks operate on spatial images");
    };
    let mut image = clean.to_vec();
    match spec.norm {
        AttackNorm::L0 => {
            let stride = 2 + c;
            for tuple in genome.chunks_exact(stride) {
                let x = (tuple[0].floor() as usize).min(w - 1);
                let y = (tuple[1].floor() as usize).min(h - 1);
                for ch in 0..c {
                    image[(ch * h + y) * w + x] = tuple[2 + ch].clamp(0.0, 1.0);
                }
            }
        }
        AttackNorm::Linf => {
            for (px, &d) in image.iter_mut().zip(genome) {
                *px = (*px + d).clamp(0.0, 1.0);
            }
        }
    }
    image
}

/// Runs the DE attack of Eq-style constrained minimization: minimize the
/// victim's confidence in the true class, subject to the spec's norm
/// bound. Returns the perturbed image as soon as the victim's argmax
/// leaves the true class, or `None` if the budget runs out first.
pub fn de_attack<V: SoftClassifier + ?Sized, R: Rng>(
    victim: &V,
    image: &[f32],
    label: usize,
    spec: &AttackSpec,
    rng: &mut R,
) -> Option<Vec<f32>> {
    let shape = victim.input_shape();
    let bounds = encode_perturbation(spec, shape);
    let cfg = DeConfig {
        population: spec.budget.population,
        iterations: spec.budget.iterations,
        ..DeConfig::default()
    };
    let objective = |candidates: &[Vec<f32>]| -> Vec<(f32, bool)> {
        let mut batch = Vec::with_capacity(candidates.len() * image.len());
        for genome in candidates {
            batch.extend_from_slice(&decode_perturbation(spec, shape, image, genome));
        }
        let probs = victim.predict_probs_batch(&batch, candidates.len());
        let k = victim.n_classes();
        probs
            .chunks_exact(k)
            .map(|row| (row[label], argmax(row) != label))
            .collect()
    };
    let winner = de_minimize(&bounds, objective, &cfg, rng)?;
    Some(decode_perturbation(spec, shape, image, &winner))
}

/// Builds the adversarial bank: for each victim and spec, attacks a seeded
/// sample of correctly classified test images until the per-cell quota is
/// met or the sample runs out. `max_candidates` bounds the per-cell sample
/// so low-success cells cannot consume the whole test set. Returns the
/// bank plus the paired clean images (needed to re-verify the norm
/// constraints).
pub fn build_bank<V: SoftClassifier>(
    victims: &[V],
    dataset: &crate::dataset::Dataset,
    specs: &[AttackSpec],
    quota: usize,
    max_candidates: Option<usize>,
    seed: u64,
) -> (AdversarialBank, Vec<Vec<f32>>) {
    let TensorShape::Spatial { h, w, c } = dataset.shape else {
        panic!("bank images are spatial");
    };
    let mut records = Vec::new();
    let mut clean_images = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    use rand::seq::SliceRandom;
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut order_rng);

    for (victim_tag, victim) in victims.iter().enumerate() {
        let mut correct: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| victim.classify(dataset.image(i)) == dataset.label(i))
            .collect();
        if let Some(cap) = max_candidates {
            correct.truncate(cap);
        }
        for (spec_idx, spec) in specs.iter().enumerate() {
            // attacks on distinct images are independent; chunked so a
            // filled quota stops early
            let mut successes: Vec<(usize, Vec<f32>)> = Vec::new();
            for chunk in correct.chunks(64) {
                if successes.len() >= quota {
                    break;
                }
                let mut hits: Vec<(usize, Vec<f32>)> = chunk
                    .par_iter()
                    .filter_map(|&i| {
                        let mut rng = ChaCha8Rng::seed_from_u64(
                            seed ^ (victim_tag as u64) << 48
                                ^ (spec_idx as u64) << 40
                                ^ i as u64,
                        );
                        de_attack(victim, dataset.image(i), dataset.label(i), spec, &mut rng)
                            .map(|img| (i, img))
                    })
                    .collect();
                hits.sort_by_key(|&(i, _)| {
                    chunk.iter().position(|&x| x == i).expect("hit from chunk")
                });
                successes.extend(hits);
            }
            successes.truncate(quota);
            for (i, image) in successes {
                records.push(BankRecord {
                    image,
                    true_label: dataset.label(i) as u16,
                    norm: spec.norm,
                    th: spec.th,
                    optimizer_tag: spec.optimizer.tag(),
                    victim_tag: victim_tag as u8,
                });
                clean_images.push(dataset.image(i).to_vec());
            }
        }
    }
    let bank = AdversarialBank {
        header: BankHeader {
            version: 1,
            count: records.len() as u32,
            height: h as u16,
            width: w as u16,
            channels: c as u16,
            n_classes: dataset.n_classes as u16,
        },
        records,
    };
    (bank, clean_images)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear {
        // one weight row per class over the flattened image
        weights: Vec<Vec<f32>>,
        shape: TensorShape,
    }

    impl SoftClassifier for Linear {
        fn n_classes(&self) -> usize {
            self.weights.len()
        }

        fn input_shape(&self) -> TensorShape {
            self.shape
        }

        fn predict_probs_batch(&self, images: &[f32], n: usize) -> Vec<f32> {
            let len = self.shape.elements();
            let mut out = Vec::with_capacity(n * self.weights.len());
            for i in 0..n {
                let img = &images[i * len..(i + 1) * len];
                let logits: Vec<f32> = self
                    .weights
                    .iter()
                    .map(|row| row.iter().zip(img).map(|(a, b)| a * b).sum())
                    .collect();
                let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = logits.iter().map(|&l| (l - max).exp()).collect();
                let sum: f32 = exps.iter().sum();
                out.extend(exps.iter().map(|&e| e / sum));
            }
            out
        }
    }

    fn tiny_victim() -> Linear {
        let len = 4 * 4 * 3;
        let mut w0 = vec![0.0f32; len];
        let mut w1 = vec![0.0f32; len];
        // class 0 likes the first channel, class 1 the second
        for i in 0..16 {
            w0[i] = 2.0;
            w1[16 + i] = 2.0;
        }
        Linear {
            weights: vec![w0, w1],
            shape: TensorShape::Spatial { h: 4, w: 4, c: 3 },
        }
    }

    #[test]
    fn encoding_dimensionalities() {
        let shape = TensorShape::Spatial { h: 32, w: 32, c: 3 };
        assert_eq!(
            encode_perturbation(&AttackSpec::new(AttackNorm::L0, 1), shape).len(),
            5
        );
        assert_eq!(
            encode_perturbation(&AttackSpec::new(AttackNorm::L0, 3), shape).len(),
            15
        );
        let small = TensorShape::Spatial { h: 8, w: 8, c: 3 };
        let bounds = encode_perturbation(&AttackSpec::new(AttackNorm::Linf, 5), small);
        assert_eq!(bounds.len(), 192);
        for &(lo, hi) in &bounds {
            assert!((lo + 5.0 / 255.0).abs() < 1e-6);
            assert!((hi - 5.0 / 255.0).abs() < 1e-6);
        }
    }

    #[test]
    fn l0_decode_touches_at_most_th_pixels() {
        let shape = TensorShape::Spatial { h: 4, w: 4, c: 3 };
        let clean = vec![0.5f32; 48];
        let spec = AttackSpec::new(AttackNorm::L0, 3);
        let genome = vec![
            0.2, 0.7, 1.0, 0.0, 0.0, // pixel (0,0)
            3.9, 3.9, 0.0, 1.0, 0.0, // pixel (3,3)
            0.2, 0.7, 0.0, 0.0, 1.0, // same pixel as the first tuple
        ];
        let adv = decode_perturbation(&spec, shape, &clean, &genome);
        let mut changed = 0;
        for y in 0..4 {
            for x in 0..4 {
                let differs = (0..3).any(|ch| adv[(ch * 4 + y) * 4 + x] != 0.5);
                changed += usize::from(differs);
            }
        }
        assert!(changed <= 3);
        assert_eq!(changed, 2);
    }

    #[test]
    fn zero_budget_attack_rarely_succeeds_at_th_one() {
        let victim = tiny_victim();
        // strong class-0 image: first channel bright
        let mut image = vec![0.05f32; 48];
        for px in image.iter_mut().take(16) {
            *px = 0.9;
        }
        assert_eq!(victim.classify(&image), 0);
        let spec = AttackSpec {
            budget: AttackBudget {
                population: 8,
                iterations: 0,
            },
            ..AttackSpec::new(AttackNorm::L0, 1)
        };
        let mut successes = 0;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            successes += usize::from(de_attack(&victim, &image, 0, &spec, &mut rng).is_some());
        }
        assert!(successes <= 5, "{successes} zero-budget successes");
    }

    #[test]
    fn de_matches_exhaustive_search_on_solvable_instances() {
        // brute force over all pixel positions and a quantized color grid;
        // DE must crack the instances the grid proves solvable
        let victim = tiny_victim();
        let spec = AttackSpec::new(AttackNorm::L0, 1);
        let shape = victim.input_shape();
        let levels = [0.0f32, 0.25, 0.5, 0.75, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut solvable = 0;
        let mut de_hits = 0;
        for trial in 0..30 {
            // borderline class-0 images
            let mut image = vec![0.1f32; 48];
            for i in 0..16 {
                image[i] = 0.30 + 0.02 * ((trial + i) % 5) as f32;
                image[16 + i] = 0.28;
            }
            if victim.classify(&image) != 0 {
                continue;
            }
            let mut grid_found = false;
            'grid: for y in 0..4 {
                for x in 0..4 {
                    for &r in &levels {
                        for &g in &levels {
                            for &b in &levels {
                                let genome = [x as f32, y as f32, r, g, b];
                                let adv = decode_perturbation(&spec, shape, &image, &genome);
                                if victim.classify(&adv) != 0 {
                                    grid_found = true;
                                    break 'grid;
                                }
                            }
                        }
                    }
                }
            }
            if !grid_found {
                continue;
            }
            solvable += 1;
            if de_attack(&victim, &image, 0, &spec, &mut rng).is_some() {
                de_hits += 1;
            }
        }
        assert!(solvable >= 10, "test images too easy/hard: {solvable}");
        assert_eq!(
            de_hits, solvable,
            "DE cracked {de_hits} of {solvable} grid-solvable instances"
        );
    }

    #[test]
    fn successful_attack_respects_linf_bound_and_flips_argmax() {
        let victim = tiny_victim();
        let mut image = vec![0.1f32; 48];
        for i in 0..16 {
            image[i] = 0.32;
            image[16 + i] = 0.30;
        }
        assert_eq!(victim.classify(&image), 0);
        let spec = AttackSpec::new(AttackNorm::Linf, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let adv = de_attack(&victim, &image, 0, &spec, &mut rng).expect("weak margin");
        assert_ne!(victim.classify(&adv), 0);
        for (a, c) in adv.iter().zip(&image) {
            assert!((a - c).abs() <= 10.0 / 255.0 + 1e-6);
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn de_attack_is_deterministic_under_fixed_seed() {
        let victim = tiny_victim();
        let mut image = vec![0.1f32; 48];
        for i in 0..16 {
            image[i] = 0.31;
            image[16 + i] = 0.29;
        }
        let spec = AttackSpec::new(AttackNorm::Linf, 3);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            de_attack(&victim, &image, 0, &spec, &mut rng)
        };
        assert_eq!(run(7), run(7));
    }
}
