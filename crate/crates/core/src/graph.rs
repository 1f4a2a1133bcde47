//! Compiles a model gene into an executable computation graph.
//!
//! Every layer gene expands to core op, then ReLU, then batch norm, in that
//! order. Boundary adapters keep the graph total over the search space:
//! conv fed by flat data gets a 1x1 reshape, dense fed by spatial data gets
//! a flatten, and multi-input nodes are aligned (average-pool spatial
//! inputs to the minimum height/width, tile flat inputs) before a channel
//! concat. Model exits route through global average pooling into a final
//! dense + softmax head, so the input and softmax endpoints are always
//! present.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genome::{
    entry_indices, exit_indices, topo_order, GeneId, GenePool, GenomeError, LayerKind,
};

/// Per-sample tensor shape: spatial feature maps or flat feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case")]
pub enum TensorShape {
    Spatial { h: usize, w: usize, c: usize },
    Flat { n: usize },
}

impl TensorShape {
    pub fn elements(&self) -> usize {
        match *self {
            TensorShape::Spatial { h, w, c } => h * w * c,
            TensorShape::Flat { n } => n,
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(self, TensorShape::Spatial { .. })
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            TensorShape::Spatial { h, w, c } => write!(f, "{h}x{w}x{c}"),
            TensorShape::Flat { n } => write!(f, "flat{n}"),
        }
    }
}

/// Typed graph ops. `PoolAlign` is adaptive average pooling to a target
/// height/width; from a 1x1 input it broadcast-tiles, which is how flat
/// inputs join a spatial concat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Input,
    Conv { kernel: usize, filters: usize, stride: usize },
    Dense { units: usize },
    BatchNorm,
    Relu,
    Flatten,
    Reshape1x1,
    PoolAlign { out_h: usize, out_w: usize },
    Concat,
    GlobalAvgPool,
    Softmax,
}

/// One node of the compiled graph: op, predecessor indices, output shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<usize>,
    pub out_shape: TensorShape,
}

/// Topologically ordered executable graph with resolved shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompiledGraph {
    pub nodes: Vec<Node>,
    pub source_model: GeneId,
    pub input_shape: TensorShape,
    pub n_classes: usize,
    pub param_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error("input shape must be spatial, got {0}")]
    FlatInput(TensorShape),
    #[error("spatial size collapsed below 1x1 at node {node}")]
    SpatialCollapse { node: usize },
    #[error("class count must be at least 2")]
    TooFewClasses,
}

/// Shape produced by aligning and concatenating the given inputs. Flat
/// inputs concatenate widths; as soon as one input is spatial, spatial
/// inputs pool to the minimum height/width and flat inputs tile to it,
/// concatenating along channels.
pub fn align_and_concat(shapes: &[TensorShape]) -> TensorShape {
    debug_assert!(shapes.len() >= 2);
    let spatial_min = shapes
        .iter()
        .filter_map(|s| match *s {
            TensorShape::Spatial { h, w, .. } => Some((h, w)),
            TensorShape::Flat { .. } => None,
        })
        .reduce(|(ah, aw), (bh, bw)| (ah.min(bh), aw.min(bw)));
    match spatial_min {
        None => TensorShape::Flat {
            n: shapes.iter().map(TensorShape::elements).sum(),
        },
        Some((h, w)) => TensorShape::Spatial {
            h,
            w,
            c: shapes
                .iter()
                .map(|s| match *s {
                    TensorShape::Spatial { c, .. } => c,
                    TensorShape::Flat { n } => n,
                })
                .sum(),
        },
    }
}

pub fn conv_out_hw(h: usize, w: usize, stride: usize) -> (usize, usize) {
    (h.div_ceil(stride), w.div_ceil(stride))
}

fn op_params(op: &Op, in_shape: TensorShape, out_shape: TensorShape) -> u64 {
    match *op {
        Op::Conv { kernel, filters, .. } => {
            let c_in = match in_shape {
                TensorShape::Spatial { c, .. } => c,
                TensorShape::Flat { n } => n,
            };
            (kernel * kernel * c_in * filters + filters) as u64
        }
        Op::Dense { units } => (in_shape.elements() * units + units) as u64,
        Op::BatchNorm => {
            let channels = match out_shape {
                TensorShape::Spatial { c, .. } => c,
                TensorShape::Flat { n } => n,
            };
            2 * channels as u64
        }
        _ => 0,
    }
}

/// Trainable parameter total: conv k*k*c_in*f + f, dense n_in*n_out + n_out,
/// batch norm 2 per channel.
pub fn param_count(graph: &CompiledGraph) -> u64 {
    graph
        .nodes
        .iter()
        .map(|node| {
            let in_shape = node
                .inputs
                .first()
                .map(|&i| graph.nodes[i].out_shape)
                .unwrap_or(graph.input_shape);
            op_params(&node.op, in_shape, node.out_shape)
        })
        .sum()
}

struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn push(&mut self, op: Op, inputs: Vec<usize>, out_shape: TensorShape) -> usize {
        self.nodes.push(Node {
            op,
            inputs,
            out_shape,
        });
        self.nodes.len() - 1
    }

    fn shape(&self, idx: usize) -> TensorShape {
        self.nodes[idx].out_shape
    }

    /// Merges multiple producer nodes into one input node, inserting
    /// alignment ops and a concat as needed. A single producer passes
    /// through untouched.
    fn merge(&mut self, sources: &[usize]) -> usize {
        if sources.len() == 1 {
            return sources[0];
        }
        let shapes: Vec<TensorShape> = sources.iter().map(|&i| self.shape(i)).collect();
        let target = align_and_concat(&shapes);
        match target {
            TensorShape::Flat { .. } => {
                let aligned: Vec<usize> = sources
                    .iter()
                    .map(|&src| match self.shape(src) {
                        TensorShape::Flat { .. } => src,
                        s @ TensorShape::Spatial { .. } => self.push(
                            Op::Flatten,
                            vec![src],
                            TensorShape::Flat { n: s.elements() },
                        ),
                    })
                    .collect();
                self.push(Op::Concat, aligned, target)
            }
            TensorShape::Spatial { h, w, .. } => {
                let aligned: Vec<usize> = sources
                    .iter()
                    .map(|&src| {
                        let node = match self.shape(src) {
                            TensorShape::Flat { n } => self.push(
                                Op::Reshape1x1,
                                vec![src],
                                TensorShape::Spatial { h: 1, w: 1, c: n },
                            ),
                            TensorShape::Spatial { .. } => src,
                        };
                        match self.shape(node) {
                            TensorShape::Spatial { h: sh, w: sw, c } if (sh, sw) != (h, w) => {
                                self.push(
                                    Op::PoolAlign { out_h: h, out_w: w },
                                    vec![node],
                                    TensorShape::Spatial { h, w, c },
                                )
                            }
                            _ => node,
                        }
                    })
                    .collect();
                self.push(Op::Concat, aligned, target)
            }
        }
    }

    /// Expands one layer gene: boundary adapter, core op, ReLU, batch norm.
    fn expand_layer(&mut self, kind: LayerKind, input: usize) -> Result<usize, CompileError> {
        let in_shape = self.shape(input);
        let core = match kind {
            LayerKind::Conv {
                kernel,
                filters,
                stride,
            } => {
                let (src, (h, w)) = match in_shape {
                    TensorShape::Spatial { h, w, .. } => (input, (h, w)),
                    TensorShape::Flat { n } => (
                        self.push(
                            Op::Reshape1x1,
                            vec![input],
                            TensorShape::Spatial { h: 1, w: 1, c: n },
                        ),
                        (1, 1),
                    ),
                };
                let (oh, ow) = conv_out_hw(h, w, stride);
                if oh == 0 || ow == 0 {
                    return Err(CompileError::SpatialCollapse {
                        node: self.nodes.len(),
                    });
                }
                self.push(
                    Op::Conv {
                        kernel,
                        filters,
                        stride,
                    },
                    vec![src],
                    TensorShape::Spatial {
                        h: oh,
                        w: ow,
                        c: filters,
                    },
                )
            }
            LayerKind::Dense { units } => {
                let src = match in_shape {
                    TensorShape::Flat { .. } => input,
                    s @ TensorShape::Spatial { .. } => self.push(
                        Op::Flatten,
                        vec![input],
                        TensorShape::Flat { n: s.elements() },
                    ),
                };
                self.push(Op::Dense { units }, vec![src], TensorShape::Flat { n: units })
            }
        };
        let shape = self.shape(core);
        let relu = self.push(Op::Relu, vec![core], shape);
        Ok(self.push(Op::BatchNorm, vec![relu], shape))
    }
}

/// Compiles a model into an executable graph. Deterministic and pure.
pub fn compile(
    pool: &GenePool,
    model_id: GeneId,
    input_shape: TensorShape,
    n_classes: usize,
) -> Result<CompiledGraph, CompileError> {
    if !input_shape.is_spatial() {
        return Err(CompileError::FlatInput(input_shape));
    }
    if n_classes < 2 {
        return Err(CompileError::TooFewClasses);
    }
    let model = pool.model(model_id)?;
    let mut b = Builder { nodes: Vec::new() };
    let input_node = b.push(Op::Input, vec![], input_shape);

    let n_blocks = model.block_refs.len();
    let block_order = topo_order(n_blocks, &model.block_edges)
        .ok_or(GenomeError::Cyclic { id: model_id })?;
    let mut block_out: Vec<Option<usize>> = vec![None; n_blocks];

    for &bpos in &block_order {
        let block = pool.block(model.block_refs[bpos])?;
        // feeds: network input for entry blocks, predecessor outputs otherwise
        let mut feeds: Vec<usize> = model
            .block_edges
            .iter()
            .filter(|&&(_, to)| to == bpos)
            .map(|&(from, _)| block_out[from].expect("topo order"))
            .collect();
        if feeds.is_empty() {
            feeds.push(input_node);
        }
        let block_input = b.merge(&feeds);

        let n_layers = block.layer_refs.len();
        let layer_order = topo_order(n_layers, &block.layer_edges)
            .ok_or(GenomeError::Cyclic { id: block.id })?;
        let mut layer_out: Vec<Option<usize>> = vec![None; n_layers];
        for &lpos in &layer_order {
            let mut feeds: Vec<usize> = block
                .layer_edges
                .iter()
                .filter(|&&(_, to)| to == lpos)
                .map(|&(from, _)| layer_out[from].expect("topo order"))
                .collect();
            if feeds.is_empty() {
                feeds.push(block_input);
            }
            let layer_input = b.merge(&feeds);
            let kind = pool.layer(block.layer_refs[lpos])?.kind;
            layer_out[lpos] = Some(b.expand_layer(kind, layer_input)?);
        }

        let exits: Vec<usize> = exit_indices(n_layers, &block.layer_edges)
            .into_iter()
            .map(|i| layer_out[i].expect("all layers expanded"))
            .collect();
        block_out[bpos] = Some(b.merge(&exits));
    }

    // classification head: pool spatial exits flat, concat, dense, softmax
    let model_exits = exit_indices(n_blocks, &model.block_edges);
    let pooled: Vec<usize> = model_exits
        .iter()
        .map(|&bpos| {
            let node = block_out[bpos].expect("all blocks expanded");
            match b.shape(node) {
                TensorShape::Spatial { c, .. } => {
                    b.push(Op::GlobalAvgPool, vec![node], TensorShape::Flat { n: c })
                }
                TensorShape::Flat { .. } => node,
            }
        })
        .collect();
    let head_in = b.merge(&pooled);
    let logits = b.push(
        Op::Dense { units: n_classes },
        vec![head_in],
        TensorShape::Flat { n: n_classes },
    );
    b.push(Op::Softmax, vec![logits], TensorShape::Flat { n: n_classes });

    let mut graph = CompiledGraph {
        nodes: b.nodes,
        source_model: model_id,
        input_shape,
        n_classes,
        param_count: 0,
    };
    graph.param_count = param_count(&graph);
    debug_assert!(!entry_indices(n_blocks, &model.block_edges).is_empty());
    Ok(graph)
}

/// Human-readable dump, one node per line.
pub fn dump(graph: &CompiledGraph) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "model {} input {} classes {} params {}",
        graph.source_model, graph.input_shape, graph.n_classes, graph.param_count
    );
    for (i, node) in graph.nodes.iter().enumerate() {
        let ins: Vec<String> = node.inputs.iter().map(|i| i.to_string()).collect();
        let in_shapes: Vec<String> = node
            .inputs
            .iter()
            .map(|&i| graph.nodes[i].out_shape.to_string())
            .collect();
        let params = node
            .inputs
            .first()
            .map(|&p| op_params(&node.op, graph.nodes[p].out_shape, node.out_shape))
            .unwrap_or(0);
        let _ = writeln!(
            out,
            "#{i} {:?} in=[{}] shapes=[{}] out={} params={}",
            node.op,
            ins.join(","),
            in_shapes.join(","),
            node.out_shape,
            params
        );
    }
    out
}
