//! Differential evolution, rand/1/bin, with early termination on success.

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeConfig {
    pub population: usize,
    pub iterations: usize,
    /// Differential weight applied to the donor difference vector.
    pub f: f32,
    /// Per-component crossover probability.
    pub cr: f32,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig {
            population: 40,
            iterations: 100,
            f: 0.5,
            cr: 0.9,
        }
    }
}

/// Minimizes a black-box objective inside box bounds. The objective maps a
/// slate of candidates to `(cost, success)` pairs; the search stops and
/// returns the first candidate whose success flag is set. Batched
/// evaluation keeps victim queries cheap.
pub fn de_minimize<R, F>(
    bounds: &[(f32, f32)],
    objective: F,
    cfg: &DeConfig,
    rng: &mut R,
) -> Option<Vec<f32>>
where
    R: Rng,
    F: Fn(&[Vec<f32>]) -> Vec<(f32, bool)>,
{
    let dim = bounds.len();
    let np = cfg.population.max(4);
    let mut population: Vec<Vec<f32>> = (0..np)
        .map(|_| {
            bounds
                .iter()
                .map(|&(lo, hi)| if lo < hi { rng.gen_range(lo..hi) } else { lo })
                .collect()
        })
        .collect();
    let results = objective(&population);
    if let Some(idx) = results.iter().position(|&(_, success)| success) {
        return Some(population[idx].clone());
    }
    let mut costs: Vec<f32> = results.into_iter().map(|(c, _)| c).collect();

    for _ in 0..cfg.iterations {
        let mut trials: Vec<Vec<f32>> = Vec::with_capacity(np);
        for i in 0..np {
            let (r1, r2, r3) = distinct_three(rng, np, i);
            let j_rand = rng.gen_range(0..dim);
            let trial: Vec<f32> = (0..dim)
                .map(|j| {
                    if j == j_rand || rng.gen::<f32>() < cfg.cr {
                        let v = population[r1][j]
                            + cfg.f * (population[r2][j] - population[r3][j]);
                        v.clamp(bounds[j].0, bounds[j].1)
                    } else {
                        population[i][j]
                    }
                })
                .collect();
            trials.push(trial);
        }
        let results = objective(&trials);
        for (i, (cost, success)) in results.into_iter().enumerate() {
            if success {
                return Some(trials.swap_remove(i));
            }
            if cost <= costs[i] {
                population[i] = std::mem::take(&mut trials[i]);
                costs[i] = cost;
            }
        }
    }
    None
}

fn distinct_three<R: Rng>(rng: &mut R, np: usize, exclude: usize) -> (usize, usize, usize) {
    let mut pick = || loop {
        let v = rng.gen_range(0..np);
        if v != exclude {
            return v;
        }
    };
    let r1 = pick();
    let r2 = loop {
        let v = pick();
        if v != r1 {
            break v;
        }
    };
    let r3 = loop {
        let v = pick();
        if v != r1 && v != r2 {
            break v;
        }
    };
    (r1, r2, r3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn minimizes_a_quadratic_bowl() {
        let bounds = vec![(-5.0f32, 5.0); 6];
        let target = [1.0f32, -2.0, 0.5, 3.0, -1.5, 0.0];
        let objective = |cands: &[Vec<f32>]| -> Vec<(f32, bool)> {
            cands
                .iter()
                .map(|x| {
                    let cost: f32 = x
                        .iter()
                        .zip(&target)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (cost, false)
                })
                .collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = DeConfig {
            population: 30,
            iterations: 200,
            ..DeConfig::default()
        };
        // no success flag: runs the full budget and returns None, so probe
        // convergence through a success threshold instead
        let objective_with_gate = |cands: &[Vec<f32>]| {
            objective(cands)
                .into_iter()
                .map(|(c, _)| (c, c < 1e-3))
                .collect::<Vec<_>>()
        };
        let best = de_minimize(&bounds, objective_with_gate, &cfg, &mut rng).expect("converges");
        let cost: f32 = best
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(cost < 1e-3);
    }

    #[test]
    fn exhausted_budget_returns_none() {
        let bounds = vec![(-1.0f32, 1.0); 3];
        let objective =
            |cands: &[Vec<f32>]| cands.iter().map(|_| (1.0f32, false)).collect::<Vec<_>>();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DeConfig {
            population: 8,
            iterations: 3,
            ..DeConfig::default()
        };
        assert!(de_minimize(&bounds, objective, &cfg, &mut rng).is_none());
    }
}
