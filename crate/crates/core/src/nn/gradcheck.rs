//! Central finite-difference gradient checking against the analytic
//! backward pass, in 64-bit floats.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GraphRuntime, Tensor};
use crate::graph::CompiledGraph;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_params: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, super::ParamSlot, usize)>,
}

/// Compares every parameter gradient of the graph against a central
/// difference of the training-mode loss. Relative error is
/// `|a - f| / max(|a|, |f|, 1e-4)`, so tiny gradients are judged on an
/// absolute scale where finite-difference noise stays far below the
/// tolerance.
pub fn check_graph_gradients(
    graph: &CompiledGraph,
    batch: &Tensor<f64>,
    labels: &[usize],
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runtime = GraphRuntime::<f64>::init(graph.clone(), &mut rng);
    let trace = runtime.forward_trace(batch).expect("shape ok");
    runtime.backward(&trace, labels);

    let h = 1e-5;
    let mut report = GradCheckReport {
        n_params: runtime.total_params(),
        max_rel_err: 0.0,
        worst: None,
    };
    for (node, slot, len) in runtime.param_slots() {
        for i in 0..len {
            let analytic = runtime.get_grad(node, slot, i);
            let orig = runtime.get_param(node, slot, i);
            runtime.set_param(node, slot, i, orig + h);
            let plus = runtime.training_loss(batch, labels);
            runtime.set_param(node, slot, i, orig - h);
            let minus = runtime.training_loss(batch, labels);
            runtime.set_param(node, slot, i, orig);
            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((node, slot, i));
            }
        }
    }
    report
}

/// Random batch in `[0, 1]` plus cycling labels, in 64-bit.
pub fn random_batch(
    graph: &CompiledGraph,
    n: usize,
    seed: u64,
) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = super::runtime::shape_dims(graph.input_shape, n);
    let len: usize = dims.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % graph.n_classes).collect();
    (Tensor::from_vec(dims, data), labels)
}

/// Samples a random compiled graph with at most `max_params` trainable
/// parameters. Structure (block/layer counts, wiring) follows the normal
/// random-model distribution; hyperparameters draw from the small end of
/// their legal sets so finite-difference sweeps stay affordable.
pub fn random_small_graph<R: Rng>(
    rng: &mut R,
    input: crate::graph::TensorShape,
    n_classes: usize,
    max_params: u64,
) -> CompiledGraph {
    use crate::genome::{GenePool, LayerKind};
    loop {
        let mut pool = GenePool::default();
        let n_blocks = rng.gen_range(1..=3);
        let mut block_ids = Vec::new();
        for _ in 0..n_blocks {
            let n_layers = rng.gen_range(1..=3);
            let layer_ids: Vec<_> = (0..n_layers)
                .map(|_| {
                    let kind = if rng.gen_bool(0.5) {
                        LayerKind::Conv {
                            kernel: [1, 3, 5][rng.gen_range(0..3)],
                            filters: 8,
                            stride: [1, 2][rng.gen_range(0..2)],
                        }
                    } else {
                        LayerKind::Dense { units: 64 }
                    };
                    pool.insert_layer(kind)
                })
                .collect();
            let extra = rng.gen_range(0..n_layers);
            let edges = crate::genome::random_wiring_for_tests(rng, n_layers, extra);
            block_ids.push(pool.insert_block(layer_ids, edges).unwrap());
        }
        let extra = rng.gen_range(0..n_blocks);
        let edges = crate::genome::random_wiring_for_tests(rng, n_blocks, extra);
        let model = pool.insert_model(block_ids, edges).unwrap();
        let graph = crate::graph::compile(&pool, model, input, n_classes).expect("valid genome");
        if graph.param_count <= max_params {
            return graph;
        }
    }
}
