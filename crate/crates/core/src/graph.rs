//! Layer DAG plus its parameter tensors.
//!
//! Graphs are immutable after construction: surgery produces new graphs.
//! Nodes are stored in topological order; edges point at predecessor ids.
//! The reserved id `@input` denotes the graph input.

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layers::LayerKind;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const INPUT_ID: &str = "@input";

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    nodes: Vec<Node>,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    index: HashMap<String, usize>,
}

impl PartialEq for ModelGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.input_shape == other.input_shape
            && self.num_classes == other.num_classes
    }
}

/// Resolved output shape of a node, batch dimension excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat { features: usize },
}

impl NodeShape {
    pub fn channels(&self) -> usize {
        match self {
            NodeShape::Spatial { c, .. } => *c,
            NodeShape::Flat { features } => *features,
        }
    }
}

impl ModelGraph {
    pub fn new(
        nodes: Vec<Node>,
        input_shape: (usize, usize, usize),
        num_classes: usize,
    ) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if node.id == INPUT_ID {
                return Err(Error::InvalidGraph(format!(
                    "node id {INPUT_ID} is reserved"
                )));
            }
            if index.insert(node.id.clone(), i).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate node id {}", node.id)));
            }
        }
        for (i, node) in nodes.iter().enumerate() {
            let want_inputs = match node.kind {
                LayerKind::Add => 2,
                _ => 1,
            };
            if node.inputs.len() != want_inputs {
                return Err(Error::InvalidGraph(format!(
                    "node {} expects {} input(s), has {}",
                    node.id,
                    want_inputs,
                    node.inputs.len()
                )));
            }
            for input in &node.inputs {
                if input == INPUT_ID {
                    continue;
                }
                match index.get(input) {
                    Some(&j) if j < i => {}
                    Some(_) => {
                        return Err(Error::InvalidGraph(format!(
                            "node {} consumes {} before it is defined",
                            node.id, input
                        )))
                    }
                    None => {
                        return Err(Error::InvalidGraph(format!(
                            "node {} consumes unknown node {}",
                            node.id, input
                        )))
                    }
                }
            }
        }
        if nodes.is_empty() {
            return Err(Error::InvalidGraph("graph has no nodes".into()));
        }
        let graph = ModelGraph {
            nodes,
            input_shape,
            num_classes,
            index,
        };
        // Shape inference doubles as whole-graph validation.
        graph.infer_shapes()?;
        Ok(graph)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    /// Node indices that consume the output of node `idx`.
    pub fn consumers(&self, idx: usize) -> Vec<usize> {
        let id = &self.nodes[idx].id;
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.iter().any(|i| i == id))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn conv_node_ids(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Conv2d { .. }))
            .map(|n| n.id.clone())
            .collect()
    }

    /// Output shape of every node, in node order.
    pub fn infer_shapes(&self) -> Result<Vec<NodeShape>> {
        let (c, h, w) = self.input_shape;
        let input_shape = NodeShape::Spatial { c, h, w };
        let mut shapes: Vec<NodeShape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let in_shapes: Vec<NodeShape> = node
                .inputs
                .iter()
                .map(|id| {
                    if id == INPUT_ID {
                        input_shape
                    } else {
                        shapes[self.index[id]]
                    }
                })
                .collect();
            let out = self.infer_node_shape(node, &in_shapes)?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    fn infer_node_shape(&self, node: &Node, inputs: &[NodeShape]) -> Result<NodeShape> {
        let spatial = |s: &NodeShape| -> Result<(usize, usize, usize)> {
            match s {
                NodeShape::Spatial { c, h, w } => Ok((*c, *h, *w)),
                NodeShape::Flat { .. } => Err(Error::InvalidGraph(format!(
                    "node {} needs a spatial input",
                    node.id
                ))),
            }
        };
        match &node.kind {
            LayerKind::Conv2d { params, .. } => {
                let (c, h, w) = spatial(&inputs[0])?;
                if c != params.in_channels {
                    return Err(Error::InvalidGraph(format!(
                        "node {}: input has {c} channels, conv expects {}",
                        node.id, params.in_channels
                    )));
                }
                let (oh, ow) = params.out_hw(h, w)?;
                Ok(NodeShape::Spatial {
                    c: params.out_channels,
                    h: oh,
                    w: ow,
                })
            }
            LayerKind::BatchNorm { channels } => {
                let (c, h, w) = spatial(&inputs[0])?;
                if c != *channels {
                    return Err(Error::InvalidGraph(format!(
                        "node {}: input has {c} channels, batchnorm expects {channels}",
                        node.id
                    )));
                }
                Ok(NodeShape::Spatial { c, h, w })
            }
            LayerKind::ReLU => Ok(inputs[0]),
            LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                let (c, h, w) = spatial(&inputs[0])?;
                if h < *kernel || w < *kernel {
                    return Err(Error::InvalidGraph(format!(
                        "node {}: pool kernel {kernel} exceeds input {h}x{w}",
                        node.id
                    )));
                }
                Ok(NodeShape::Spatial {
                    c,
                    h: (h - kernel) / stride + 1,
                    w: (w - kernel) / stride + 1,
                })
            }
            LayerKind::GlobalAvgPool => {
                let (c, _, _) = spatial(&inputs[0])?;
                Ok(NodeShape::Flat { features: c })
            }
            LayerKind::Flatten => {
                let (c, h, w) = spatial(&inputs[0])?;
                Ok(NodeShape::Flat { features: c * h * w })
            }
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                let features = match inputs[0] {
                    NodeShape::Flat { features } => features,
                    NodeShape::Spatial { .. } => {
                        return Err(Error::InvalidGraph(format!(
                            "node {}: dense needs a flat input",
                            node.id
                        )))
                    }
                };
                if features != *in_features {
                    return Err(Error::InvalidGraph(format!(
                        "node {}: input has {features} features, dense expects {in_features}",
                        node.id
                    )));
                }
                Ok(NodeShape::Flat {
                    features: *out_features,
                })
            }
            LayerKind::Add => {
                if inputs[0] != inputs[1] {
                    return Err(Error::InvalidGraph(format!(
                        "node {}: add inputs differ: {:?} vs {:?}",
                        node.id, inputs[0], inputs[1]
                    )));
                }
                Ok(inputs[0])
            }
            LayerKind::ChannelPad {
                out_channels,
                positions,
            } => {
                let (c, h, w) = spatial(&inputs[0])?;
                if positions.len() != c {
                    return Err(Error::InvalidGraph(format!(
                        "node {}: channelpad has {} positions for {c} channels",
                        node.id,
                        positions.len()
                    )));
                }
                Ok(NodeShape::Spatial {
                    c: *out_channels,
                    h,
                    w,
                })
            }
            LayerKind::Softmax => Ok(inputs[0]),
        }
    }
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// Parameter tensors of one node.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeParams<S: Scalar = f32> {
    Conv {
        weight: Tensor<S>,
        bias: Option<Tensor<S>>,
    },
    BatchNorm {
        gamma: Tensor<S>,
        beta: Tensor<S>,
        running_mean: Tensor<S>,
        running_var: Tensor<S>,
    },
    Dense {
        weight: Tensor<S>,
        bias: Tensor<S>,
    },
}

impl<S: Scalar> NodeParams<S> {
    /// Tensors in serialization order, with their role names.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<S>)> {
        match self {
            NodeParams::Conv { weight, bias } => {
                let mut v = vec![("weight", weight)];
                if let Some(b) = bias {
                    v.push(("bias", b));
                }
                v
            }
            NodeParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => vec![
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
            NodeParams::Dense { weight, bias } => vec![("weight", weight), ("bias", bias)],
        }
    }

    /// Element count of the trainable tensors only (running stats excluded).
    pub fn trainable_elements(&self) -> usize {
        match self {
            NodeParams::Conv { weight, bias } => {
                weight.len() + bias.as_ref().map_or(0, Tensor::len)
            }
            NodeParams::BatchNorm { gamma, beta, .. } => gamma.len() + beta.len(),
            NodeParams::Dense { weight, bias } => weight.len() + bias.len(),
        }
    }

    pub fn convert<T: Scalar>(&self) -> NodeParams<T> {
        match self {
            NodeParams::Conv { weight, bias } => NodeParams::Conv {
                weight: weight.convert(),
                bias: bias.as_ref().map(Tensor::convert),
            },
            NodeParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => NodeParams::BatchNorm {
                gamma: gamma.convert(),
                beta: beta.convert(),
                running_mean: running_mean.convert(),
                running_var: running_var.convert(),
            },
            NodeParams::Dense { weight, bias } => NodeParams::Dense {
                weight: weight.convert(),
                bias: bias.convert(),
            },
        }
    }
}

/// All parameter tensors of a model, keyed by node id.
///
/// A BTreeMap keeps iteration order deterministic, which matters for
/// serialization and for fixed-order gradient updates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights<S: Scalar = f32> {
    map: BTreeMap<String, NodeParams<S>>,
}

impl<S: Scalar> ModelWeights<S> {
    pub fn new() -> Self {
        ModelWeights {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, params: NodeParams<S>) {
        self.map.insert(id.into(), params);
    }

    pub fn get(&self, id: &str) -> Option<&NodeParams<S>> {
        self.map.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut NodeParams<S>> {
        self.map.get_mut(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeParams<S>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut NodeParams<S>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn trainable_elements(&self) -> usize {
        self.map.values().map(NodeParams::trainable_elements).sum()
    }

    pub fn convert<T: Scalar>(&self) -> ModelWeights<T> {
        let mut out = ModelWeights::new();
        for (id, p) in &self.map {
            out.insert(id.clone(), p.convert());
        }
        out
    }

    /// Fetch conv weights or fail with a graph-level error.
    pub fn conv_weight(&self, id: &str) -> Result<&Tensor<S>> {
        match self.get(id) {
            Some(NodeParams::Conv { weight, .. }) => Ok(weight),
            _ => Err(Error::InvalidGraph(format!("missing conv weights for {id}"))),
        }
    }
}

/// He-normal initialization for every parametric node, deterministic per seed.
pub fn init_weights(graph: &ModelGraph, seed: u64) -> Result<ModelWeights<f32>> {
    let mut rng = Rng::new(seed);
    let mut weights = ModelWeights::new();
    for node in graph.nodes() {
        match &node.kind {
            LayerKind::Conv2d { params, bias } => {
                let fan_in = (params.in_channels * params.kernel_h * params.kernel_w) as f64;
                let std = (2.0 / fan_in).sqrt() as f32;
                let shape = [
                    params.out_channels,
                    params.in_channels,
                    params.kernel_h,
                    params.kernel_w,
                ];
                let mut weight = Tensor::zeros(&shape);
                for v in weight.data_mut() {
                    *v = rng.normal_f32() * std;
                }
                let bias = bias.then(|| Tensor::zeros(&[params.out_channels]));
                weights.insert(node.id.clone(), NodeParams::Conv { weight, bias });
            }
            LayerKind::BatchNorm { channels } => {
                weights.insert(
                    node.id.clone(),
                    NodeParams::BatchNorm {
                        gamma: Tensor::filled(&[*channels], 1.0),
                        beta: Tensor::zeros(&[*channels]),
                        running_mean: Tensor::zeros(&[*channels]),
                        running_var: Tensor::filled(&[*channels], 1.0),
                    },
                );
            }
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                let std = (2.0 / *in_features as f64).sqrt() as f32;
                let mut weight = Tensor::zeros(&[*out_features, *in_features]);
                for v in weight.data_mut() {
                    *v = rng.normal_f32() * std;
                }
                weights.insert(
                    node.id.clone(),
                    NodeParams::Dense {
                        weight,
                        bias: Tensor::zeros(&[*out_features]),
                    },
                );
            }
            _ => {}
        }
    }
    Ok(weights)
}

/// Check that every parametric node has weights of the right shape.
pub fn validate_weights<S: Scalar>(graph: &ModelGraph, weights: &ModelWeights<S>) -> Result<()> {
    for node in graph.nodes() {
        match &node.kind {
            LayerKind::Conv2d { params, bias } => {
                let Some(NodeParams::Conv { weight, bias: b }) = weights.get(&node.id) else {
                    return Err(Error::InvalidGraph(format!(
                        "missing conv weights for {}",
                        node.id
                    )));
                };
                let want = [
                    params.out_channels,
                    params.in_channels,
                    params.kernel_h,
                    params.kernel_w,
                ];
                if weight.shape() != want {
                    return Err(Error::ShapeMismatch {
                        context: "stored conv weight",
                        expected: format!("{want:?}"),
                        got: format!("{:?} for node {}", weight.shape(), node.id),
                    });
                }
                if *bias != b.is_some() {
                    return Err(Error::InvalidGraph(format!(
                        "bias presence mismatch for {}",
                        node.id
                    )));
                }
            }
            LayerKind::BatchNorm { channels } => {
                let Some(NodeParams::BatchNorm { gamma, .. }) = weights.get(&node.id) else {
                    return Err(Error::InvalidGraph(format!(
                        "missing batchnorm weights for {}",
                        node.id
                    )));
                };
                if gamma.shape() != [*channels] {
                    return Err(Error::ShapeMismatch {
                        context: "stored batchnorm params",
                        expected: format!("[{channels}]"),
                        got: format!("{:?} for node {}", gamma.shape(), node.id),
                    });
                }
            }
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                let Some(NodeParams::Dense { weight, .. }) = weights.get(&node.id) else {
                    return Err(Error::InvalidGraph(format!(
                        "missing dense weights for {}",
                        node.id
                    )));
                };
                if weight.shape() != [*out_features, *in_features] {
                    return Err(Error::ShapeMismatch {
                        context: "stored dense weight",
                        expected: format!("[{out_features}, {in_features}]"),
                        got: format!("{:?} for node {}", weight.shape(), node.id),
                    });
                }
            }
            _ => {}
        }
    }
    Ok(())
}
