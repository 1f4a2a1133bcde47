//! Weight storage and whole-graph forward/backward execution.

use rand::Rng;
use thiserror::Error;

use super::ops;
use super::{Scalar, Tensor};
use crate::graph::{CompiledGraph, Op, TensorShape};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error("batch shape {got:?} does not match graph input {want}")]
    ShapeMismatch { got: Vec<usize>, want: TensorShape },
}

/// One trainable tensor with its gradient and momentum buffers.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub velocity: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.dims.clone());
        let velocity = Tensor::zeros(value.dims.clone());
        Param {
            value,
            grad,
            velocity,
        }
    }
}

#[derive(Debug, Clone)]
enum NodeState<T> {
    None,
    Conv { weight: Param<T>, bias: Param<T> },
    Dense { weight: Param<T>, bias: Param<T> },
    BatchNorm {
        gamma: Param<T>,
        beta: Param<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
    },
}

/// Names one trainable tensor of a node, for parameter enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    Weight,
    Bias,
    Gamma,
    Beta,
}

/// Everything a forward pass keeps around for the backward pass.
pub struct ForwardTrace<T> {
    pub activations: Vec<Tensor<T>>,
    bn_stats: Vec<Option<ops::BnStats<T>>>,
}

/// A compiled graph plus its weights. Duplicate block references in the
/// source genome expand to separate nodes, so they hold distinct weights.
#[derive(Debug, Clone)]
pub struct GraphRuntime<T> {
    pub graph: CompiledGraph,
    states: Vec<NodeState<T>>,
}

pub(crate) fn shape_dims(shape: TensorShape, n: usize) -> Vec<usize> {
    match shape {
        TensorShape::Spatial { h, w, c } => vec![n, c, h, w],
        TensorShape::Flat { n: f } => vec![n, f],
    }
}

impl<T: Scalar> GraphRuntime<T> {
    /// He-uniform initialization for conv/dense weights (fan-in), zero
    /// biases, unit-scale batch norm. The value stream is drawn in f64 so
    /// f32 and f64 instantiations of one seed see the same numbers.
    pub fn init<R: Rng>(graph: CompiledGraph, rng: &mut R) -> Self {
        let mut states = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            let in_shape = node
                .inputs
                .first()
                .map(|&i| graph.nodes[i].out_shape)
                .unwrap_or(graph.input_shape);
            let state = match node.op {
                Op::Conv { kernel, filters, .. } => {
                    let c_in = match in_shape {
                        TensorShape::Spatial { c, .. } => c,
                        TensorShape::Flat { n } => n,
                    };
                    let fan_in = c_in * kernel * kernel;
                    let weight = he_uniform(rng, vec![filters, fan_in], fan_in);
                    NodeState::Conv {
                        weight: Param::new(weight),
                        bias: Param::new(Tensor::zeros(vec![filters])),
                    }
                }
                Op::Dense { units } => {
                    let fan_in = in_shape.elements();
                    let weight = he_uniform(rng, vec![fan_in, units], fan_in);
                    NodeState::Dense {
                        weight: Param::new(weight),
                        bias: Param::new(Tensor::zeros(vec![units])),
                    }
                }
                Op::BatchNorm => {
                    let channels = match node.out_shape {
                        TensorShape::Spatial { c, .. } => c,
                        TensorShape::Flat { n } => n,
                    };
                    NodeState::BatchNorm {
                        gamma: Param::new(Tensor::from_vec(
                            vec![channels],
                            vec![T::one(); channels],
                        )),
                        beta: Param::new(Tensor::zeros(vec![channels])),
                        running_mean: vec![T::zero(); channels],
                        running_var: vec![T::one(); channels],
                    }
                }
                _ => NodeState::None,
            };
            states.push(state);
        }
        GraphRuntime { graph, states }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<(), RuntimeError> {
        let want = shape_dims(self.graph.input_shape, batch.dims[0]);
        if batch.dims != want {
            return Err(RuntimeError::ShapeMismatch {
                got: batch.dims.clone(),
                want: self.graph.input_shape,
            });
        }
        Ok(())
    }

    /// Executes every node. In training mode batch norm uses batch
    /// statistics (returned per node); in inference mode it reads the
    /// stored running statistics and the stats vector stays empty.
    fn run_nodes(&self, batch: &Tensor<T>, training: bool) -> ForwardTrace<T> {
        let n_nodes = self.graph.nodes.len();
        let mut activations: Vec<Tensor<T>> = Vec::with_capacity(n_nodes);
        let mut bn_stats: Vec<Option<ops::BnStats<T>>> = vec![None; n_nodes];
        for (idx, node) in self.graph.nodes.iter().enumerate() {
            let out = match node.op {
                Op::Input => batch.clone(),
                Op::Conv { kernel, stride, .. } => {
                    let NodeState::Conv { weight, bias } = &self.states[idx] else {
                        unreachable!()
                    };
                    ops::conv_forward(
                        &activations[node.inputs[0]],
                        &weight.value,
                        &bias.value,
                        kernel,
                        stride,
                    )
                }
                Op::Dense { .. } => {
                    let NodeState::Dense { weight, bias } = &self.states[idx] else {
                        unreachable!()
                    };
                    ops::dense_forward(&activations[node.inputs[0]], &weight.value, &bias.value)
                }
                Op::BatchNorm => {
                    let NodeState::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    } = &self.states[idx]
                    else {
                        unreachable!()
                    };
                    let input = &activations[node.inputs[0]];
                    if training {
                        let (out, stats) =
                            ops::batchnorm_forward_train(input, &gamma.value, &beta.value);
                        bn_stats[idx] = Some(stats);
                        out
                    } else {
                        ops::batchnorm_forward_infer(
                            input,
                            &gamma.value,
                            &beta.value,
                            running_mean,
                            running_var,
                        )
                    }
                }
                Op::Relu => ops::relu_forward(&activations[node.inputs[0]]),
                Op::Flatten => {
                    let t = &activations[node.inputs[0]];
                    let n = t.batch();
                    t.reshaped(vec![n, t.len() / n])
                }
                Op::Reshape1x1 => {
                    let t = &activations[node.inputs[0]];
                    let n = t.batch();
                    t.reshaped(vec![n, t.len() / n, 1, 1])
                }
                Op::PoolAlign { out_h, out_w } => {
                    ops::pool_align_forward(&activations[node.inputs[0]], out_h, out_w)
                }
                Op::Concat => {
                    let inputs: Vec<&Tensor<T>> =
                        node.inputs.iter().map(|&i| &activations[i]).collect();
                    ops::concat_forward(&inputs)
                }
                Op::GlobalAvgPool => ops::global_avg_pool_forward(&activations[node.inputs[0]]),
                Op::Softmax => ops::softmax_forward(&activations[node.inputs[0]]),
            };
            activations.push(out);
        }
        ForwardTrace {
            activations,
            bn_stats,
        }
    }

    /// Training-mode pass: keeps every activation for the backward pass
    /// and folds the batch statistics into the running ones.
    pub fn forward_trace(&mut self, batch: &Tensor<T>) -> Result<ForwardTrace<T>, RuntimeError> {
        self.check_batch(batch)?;
        let trace = self.run_nodes(batch, true);
        let momentum = T::from_f64(ops::BN_MOMENTUM);
        let blend = T::one() - momentum;
        for (idx, stats) in trace.bn_stats.iter().enumerate() {
            let Some(stats) = stats else { continue };
            let NodeState::BatchNorm {
                running_mean,
                running_var,
                ..
            } = &mut self.states[idx]
            else {
                unreachable!()
            };
            for (r, &b) in running_mean.iter_mut().zip(&stats.mean) {
                *r = momentum * *r + blend * b;
            }
            for (r, &b) in running_var.iter_mut().zip(&stats.var) {
                *r = momentum * *r + blend * b;
            }
        }
        Ok(trace)
    }

    /// Training-mode loss (batch statistics) without touching the running
    /// buffers; the probe used by finite-difference checks.
    pub fn training_loss(&self, batch: &Tensor<T>, labels: &[usize]) -> T {
        let trace = self.run_nodes(batch, true);
        ops::cross_entropy_loss(trace.activations.last().expect("graph has nodes"), labels)
    }

    /// Inference-mode class probabilities; deterministic, no state change.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>, RuntimeError> {
        self.check_batch(batch)?;
        Ok(self
            .run_nodes(batch, false)
            .activations
            .pop()
            .expect("graph has nodes"))
    }

    /// Inference-mode pass keeping all activations, for shape checks.
    pub fn forward_all_nodes(&self, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>, RuntimeError> {
        self.check_batch(batch)?;
        Ok(self.run_nodes(batch, false).activations)
    }

    /// Backpropagates mean softmax cross-entropy through the trace,
    /// accumulating parameter gradients. Returns the loss.
    pub fn backward(&mut self, trace: &ForwardTrace<T>, labels: &[usize]) -> T {
        for state in &mut self.states {
            match state {
                NodeState::Conv { weight, bias } | NodeState::Dense { weight, bias } => {
                    weight.grad.fill(T::zero());
                    bias.grad.fill(T::zero());
                }
                NodeState::BatchNorm { gamma, beta, .. } => {
                    gamma.grad.fill(T::zero());
                    beta.grad.fill(T::zero());
                }
                NodeState::None => {}
            }
        }
        let n_nodes = self.graph.nodes.len();
        let probs = &trace.activations[n_nodes - 1];
        let loss = ops::cross_entropy_loss(probs, labels);

        let mut act_grads: Vec<Option<Tensor<T>>> = vec![None; n_nodes];
        // fused softmax + cross-entropy gradient lands on the logits node
        let softmax_node = n_nodes - 1;
        let logits_node = self.graph.nodes[softmax_node].inputs[0];
        act_grads[logits_node] = Some(ops::softmax_cross_entropy_backward(probs, labels));

        for idx in (0..n_nodes - 1).rev() {
            let Some(dout) = act_grads[idx].take() else {
                continue;
            };
            let node = self.graph.nodes[idx].clone();
            match node.op {
                Op::Input | Op::Softmax => {}
                Op::Conv { kernel, stride, .. } => {
                    let input = &trace.activations[node.inputs[0]];
                    let NodeState::Conv { weight, bias } = &mut self.states[idx] else {
                        unreachable!()
                    };
                    let (dinput, dweight, dbias) =
                        ops::conv_backward(input, &weight.value, &dout, kernel, stride);
                    accumulate(&mut weight.grad, &dweight);
                    accumulate(&mut bias.grad, &dbias);
                    add_grad(&mut act_grads, node.inputs[0], dinput);
                }
                Op::Dense { .. } => {
                    let input = &trace.activations[node.inputs[0]];
                    let NodeState::Dense { weight, bias } = &mut self.states[idx] else {
                        unreachable!()
                    };
                    let (dinput, dweight, dbias) =
                        ops::dense_backward(input, &weight.value, &dout);
                    accumulate(&mut weight.grad, &dweight);
                    accumulate(&mut bias.grad, &dbias);
                    add_grad(&mut act_grads, node.inputs[0], dinput);
                }
                Op::BatchNorm => {
                    let input = &trace.activations[node.inputs[0]];
                    let stats = trace.bn_stats[idx]
                        .as_ref()
                        .expect("backward requires a training-mode trace");
                    let NodeState::BatchNorm { gamma, beta, .. } = &mut self.states[idx] else {
                        unreachable!()
                    };
                    let (dinput, dgamma, dbeta) =
                        ops::batchnorm_backward(input, &gamma.value, stats, &dout);
                    accumulate(&mut gamma.grad, &dgamma);
                    accumulate(&mut beta.grad, &dbeta);
                    add_grad(&mut act_grads, node.inputs[0], dinput);
                }
                Op::Relu => {
                    let input = &trace.activations[node.inputs[0]];
                    add_grad(
                        &mut act_grads,
                        node.inputs[0],
                        ops::relu_backward(input, &dout),
                    );
                }
                Op::Flatten | Op::Reshape1x1 => {
                    let in_dims = trace.activations[node.inputs[0]].dims.clone();
                    add_grad(&mut act_grads, node.inputs[0], dout.reshaped(in_dims));
                }
                Op::PoolAlign { out_h, out_w } => {
                    let in_dims = trace.activations[node.inputs[0]].dims.clone();
                    add_grad(
                        &mut act_grads,
                        node.inputs[0],
                        ops::pool_align_backward(&in_dims, &dout, out_h, out_w),
                    );
                }
                Op::Concat => {
                    let inputs: Vec<&Tensor<T>> =
                        node.inputs.iter().map(|&i| &trace.activations[i]).collect();
                    let grads = ops::concat_backward(&inputs, &dout);
                    for (&target, g) in node.inputs.iter().zip(grads) {
                        add_grad(&mut act_grads, target, g);
                    }
                }
                Op::GlobalAvgPool => {
                    let in_dims = trace.activations[node.inputs[0]].dims.clone();
                    add_grad(
                        &mut act_grads,
                        node.inputs[0],
                        ops::global_avg_pool_backward(&in_dims, &dout),
                    );
                }
            }
        }
        loss
    }

    /// One SGD-with-momentum step over every parameter:
    /// `v = mu * v + g; w -= lr * v`.
    pub fn sgd_step(&mut self, lr: T, momentum: T) {
        self.visit_params_mut(|p| {
            for i in 0..p.value.data.len() {
                p.velocity.data[i] = momentum * p.velocity.data[i] + p.grad.data[i];
                p.value.data[i] -= lr * p.velocity.data[i];
            }
        });
    }

    fn visit_params_mut(&mut self, mut f: impl FnMut(&mut Param<T>)) {
        for state in &mut self.states {
            match state {
                NodeState::Conv { weight, bias } | NodeState::Dense { weight, bias } => {
                    f(weight);
                    f(bias);
                }
                NodeState::BatchNorm { gamma, beta, .. } => {
                    f(gamma);
                    f(beta);
                }
                NodeState::None => {}
            }
        }
    }

    /// Enumerates `(node index, slot, length)` for every trainable tensor.
    pub fn param_slots(&self) -> Vec<(usize, ParamSlot, usize)> {
        let mut out = Vec::new();
        for (idx, state) in self.states.iter().enumerate() {
            match state {
                NodeState::Conv { weight, bias } | NodeState::Dense { weight, bias } => {
                    out.push((idx, ParamSlot::Weight, weight.value.len()));
                    out.push((idx, ParamSlot::Bias, bias.value.len()));
                }
                NodeState::BatchNorm { gamma, beta, .. } => {
                    out.push((idx, ParamSlot::Gamma, gamma.value.len()));
                    out.push((idx, ParamSlot::Beta, beta.value.len()));
                }
                NodeState::None => {}
            }
        }
        out
    }

    fn param(&self, node: usize, slot: ParamSlot) -> &Param<T> {
        match (&self.states[node], slot) {
            (NodeState::Conv { weight, .. }, ParamSlot::Weight)
            | (NodeState::Dense { weight, .. }, ParamSlot::Weight) => weight,
            (NodeState::Conv { bias, .. }, ParamSlot::Bias)
            | (NodeState::Dense { bias, .. }, ParamSlot::Bias) => bias,
            (NodeState::BatchNorm { gamma, .. }, ParamSlot::Gamma) => gamma,
            (NodeState::BatchNorm { beta, .. }, ParamSlot::Beta) => beta,
            _ => panic!("no such parameter slot"),
        }
    }

    fn param_mut(&mut self, node: usize, slot: ParamSlot) -> &mut Param<T> {
        match (&mut self.states[node], slot) {
            (NodeState::Conv { weight, .. }, ParamSlot::Weight)
            | (NodeState::Dense { weight, .. }, ParamSlot::Weight) => weight,
            (NodeState::Conv { bias, .. }, ParamSlot::Bias)
            | (NodeState::Dense { bias, .. }, ParamSlot::Bias) => bias,
            (NodeState::BatchNorm { gamma, .. }, ParamSlot::Gamma) => gamma,
            (NodeState::BatchNorm { beta, .. }, ParamSlot::Beta) => beta,
            _ => panic!("no such parameter slot"),
        }
    }

    pub fn get_param(&self, node: usize, slot: ParamSlot, i: usize) -> T {
        self.param(node, slot).value.data[i]
    }

    pub fn set_param(&mut self, node: usize, slot: ParamSlot, i: usize, v: T) {
        self.param_mut(node, slot).value.data[i] = v;
    }

    pub fn get_grad(&self, node: usize, slot: ParamSlot, i: usize) -> T {
        self.param(node, slot).grad.data[i]
    }

    /// Zeroes every trainable tensor of one node.
    pub fn zero_node_params(&mut self, node: usize) {
        match &mut self.states[node] {
            NodeState::Conv { weight, bias } | NodeState::Dense { weight, bias } => {
                weight.value.fill(T::zero());
                bias.value.fill(T::zero());
            }
            NodeState::BatchNorm { gamma, beta, .. } => {
                gamma.value.fill(T::zero());
                beta.value.fill(T::zero());
            }
            NodeState::None => {}
        }
    }

    pub fn total_params(&self) -> usize {
        self.param_slots().iter().map(|&(_, _, len)| len).sum()
    }

    /// True if any weight or running statistic is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        let mut bad = false;
        for state in &self.states {
            match state {
                NodeState::Conv { weight, bias } | NodeState::Dense { weight, bias } => {
                    bad |= weight.value.data.iter().any(|v| !v.is_finite());
                    bad |= bias.value.data.iter().any(|v| !v.is_finite());
                }
                NodeState::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    bad |= gamma.value.data.iter().any(|v| !v.is_finite());
                    bad |= beta.value.data.iter().any(|v| !v.is_finite());
                    bad |= running_mean.iter().any(|v| !v.is_finite());
                    bad |= running_var.iter().any(|v| !v.is_finite());
                }
                NodeState::None => {}
            }
        }
        bad
    }
}

fn accumulate<T: Scalar>(into: &mut Tensor<T>, from: &Tensor<T>) {
    for (a, b) in into.data.iter_mut().zip(&from.data) {
        *a += *b;
    }
}

fn add_grad<T: Scalar>(grads: &mut [Option<Tensor<T>>], target: usize, g: Tensor<T>) {
    match &mut grads[target] {
        Some(existing) => accumulate(existing, &g),
        slot @ None => *slot = Some(g),
    }
}

fn he_uniform<T: Scalar, R: Rng>(rng: &mut R, dims: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let len: usize = dims.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::from_vec(dims, data)
}

/// A trained classifier: compiled graph plus frozen weights, evaluated in
/// inference mode. This is the interface attacks and robustness scoring
/// consume.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    runtime: GraphRuntime<f32>,
}

impl TrainedModel {
    pub fn new(runtime: GraphRuntime<f32>) -> Self {
        TrainedModel { runtime }
    }

    pub fn graph(&self) -> &CompiledGraph {
        &self.runtime.graph
    }

    /// Class probabilities for a batch of flattened images, row-major
    /// `[n, n_classes]`.
    pub fn predict_probs_batch(&self, images: &[f32], n: usize) -> Vec<f32> {
        let dims = shape_dims(self.runtime.graph.input_shape, n);
        let batch = Tensor::from_vec(dims, images.to_vec());
        self.runtime
            .forward(&batch)
            .expect("shape checked by construction")
            .data
    }

    pub fn predict_probs(&self, image: &[f32]) -> Vec<f32> {
        self.predict_probs_batch(image, 1)
    }

    pub fn classify_batch(&self, images: &[f32], n: usize) -> Vec<usize> {
        let k = self.runtime.graph.n_classes;
        let probs = self.predict_probs_batch(images, n);
        Tensor::from_vec(vec![n, k], probs).argmax_rows()
    }

    pub fn classify(&self, image: &[f32]) -> usize {
        self.classify_batch(image, 1)[0]
    }

    pub fn n_classes(&self) -> usize {
        self.runtime.graph.n_classes
    }

    pub fn input_shape(&self) -> TensorShape {
        self.runtime.graph.input_shape
    }
}
