//! Filter selection and structural surgery.
//!
//! Pruning removes whole conv filters and every downstream slice that
//! consumed them: the next conv's input channels, batch-norm parameter
//! vectors, and dense input columns reached through flatten or global
//! pooling. Channel bookkeeping rides on a union-find over "channel
//! groups": node outputs that must share channel indexing. Any group that
//! feeds a residual add (or is the graph input, or a pad output) is
//! protected; rates against protected layers are ignored with a warning or
//! rejected, by policy.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::flops::{count_flops_params, FlopReport};
use crate::graph::{ModelGraph, ModelWeights, Node, NodeParams, NodeShape, INPUT_ID};
use crate::layers::{ConvParams, LayerKind};
use crate::ranking::{RankMethod, RankVector};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Channel groups
// ---------------------------------------------------------------------------

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new() -> Self {
        UnionFind { parent: Vec::new() }
    }
    fn make(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
    fn union(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[rb] = ra;
        }
        ra
    }
}

/// Channel-coupling analysis of a graph.
pub struct ChannelGroups {
    /// Group of each node's output (root ids).
    node_group: Vec<usize>,
    input_group: usize,
    /// Groups whose channel sets must not change.
    protected: Vec<bool>,
}

impl ChannelGroups {
    pub fn group_of(&self, node_idx: usize) -> usize {
        self.node_group[node_idx]
    }

    pub fn input_group(&self) -> usize {
        self.input_group
    }

    pub fn is_protected(&self, group: usize) -> bool {
        self.protected[group]
    }
}

pub fn channel_groups(graph: &ModelGraph) -> ChannelGroups {
    let nodes = graph.nodes();
    let mut uf = UnionFind::new();
    let input_group = uf.make();
    let mut raw: Vec<usize> = Vec::with_capacity(nodes.len());
    let mut add_groups: Vec<usize> = Vec::new();
    let mut pad_groups: Vec<usize> = Vec::new();
    for node in nodes {
        let input_of = |slot: usize, raw: &Vec<usize>| -> usize {
            let id = &node.inputs[slot];
            if id == INPUT_ID {
                input_group
            } else {
                raw[graph.index_of(id).expect("validated")]
            }
        };
        let g = match &node.kind {
            LayerKind::Conv2d { .. } | LayerKind::Dense { .. } => uf.make(),
            LayerKind::ChannelPad { .. } => {
                let g = uf.make();
                pad_groups.push(g);
                g
            }
            LayerKind::Add => {
                let g = uf.union(input_of(0, &raw), input_of(1, &raw));
                add_groups.push(g);
                g
            }
            // Channel-preserving nodes inherit their input's group.
            LayerKind::BatchNorm { .. }
            | LayerKind::ReLU
            | LayerKind::MaxPool { .. }
            | LayerKind::AvgPool { .. }
            | LayerKind::GlobalAvgPool
            | LayerKind::Flatten
            | LayerKind::Softmax => input_of(0, &raw),
        };
        raw.push(g);
    }
    let n_groups = uf.parent.len();
    let mut protected = vec![false; n_groups];
    protected[uf.find(input_group)] = true;
    for g in add_groups {
        protected[uf.find(g)] = true;
    }
    for g in pad_groups {
        protected[uf.find(g)] = true;
    }
    // The logits group stays intact: class count is part of the contract.
    if let Some(last) = raw.last() {
        protected[uf.find(*last)] = true;
    }
    let node_group: Vec<usize> = raw.iter().map(|&g| uf.find(g)).collect();
    ChannelGroups {
        node_group,
        input_group: uf.find(input_group),
        protected,
    }
}

/// Conv layers whose filters may be removed without breaking residual or
/// output shapes.
pub fn prunable_conv_layers(graph: &ModelGraph) -> Vec<String> {
    let groups = channel_groups(graph);
    graph
        .nodes()
        .iter()
        .enumerate()
        .filter(|(i, n)| {
            matches!(n.kind, LayerKind::Conv2d { .. }) && !groups.is_protected(groups.group_of(*i))
        })
        .map(|(_, n)| n.id.clone())
        .collect()
}

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PlanLayer {
    pub layer_id: String,
    pub rate: f32,
    /// Surviving filter indices, strictly increasing.
    pub kept: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningPlan {
    pub method: RankMethod,
    pub layers: Vec<PlanLayer>,
}

impl PruningPlan {
    pub fn layer(&self, id: &str) -> Option<&PlanLayer> {
        self.layers.iter().find(|l| l.layer_id == id)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# method {}\n", self.method.name());
        for layer in &self.layers {
            let kept: Vec<String> = layer.kept.iter().map(ToString::to_string).collect();
            out.push_str(&format!(
                "{} {} {}\n",
                layer.layer_id,
                layer.rate,
                kept.join(",")
            ));
        }
        out
    }

    pub fn from_text(text: &str, path: &str) -> Result<Self> {
        let mut method = RankMethod::L1;
        let mut layers = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(name) = rest.trim().strip_prefix("method ") {
                    method = RankMethod::parse(name.trim())?;
                }
                continue;
            }
            let perr = |message: String| Error::Parse {
                path: path.into(),
                message: format!("line {}: {message}", lineno + 1),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(perr("expected: layer_id rate kept_list".into()));
            }
            let rate: f32 = fields[1]
                .parse()
                .map_err(|_| perr(format!("bad rate {:?}", fields[1])))?;
            let kept: Vec<usize> = fields[2]
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| perr(format!("bad index {s:?}"))))
                .collect::<Result<_>>()?;
            layers.push(PlanLayer {
                layer_id: fields[0].to_string(),
                rate,
                kept,
            });
        }
        Ok(PruningPlan { method, layers })
    }
}

/// Per-layer pruning rates; `default` applies to prunable layers without an
/// explicit entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RateMap {
    pub rates: BTreeMap<String, f32>,
    pub default: Option<f32>,
}

impl RateMap {
    pub fn from_text(text: &str, path: &str) -> Result<Self> {
        let mut map = RateMap::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |message: String| Error::Parse {
                path: path.into(),
                message: format!("line {}: {message}", lineno + 1),
            };
            let Some((key, value)) = line.split_once('=') else {
                return Err(perr("expected layer_id = rate".into()));
            };
            let rate: f32 = value
                .trim()
                .parse()
                .map_err(|_| perr(format!("bad rate {:?}", value.trim())))?;
            let key = key.trim();
            if key == "default" {
                map.default = Some(rate);
            } else {
                map.rates.insert(key.to_string(), rate);
            }
        }
        Ok(map)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(d) = self.default {
            out.push_str(&format!("default = {d}\n"));
        }
        for (id, r) in &self.rates {
            out.push_str(&format!("{id} = {r}\n"));
        }
        out
    }

    /// Resolve to per-layer rates over the graph's prunable conv layers.
    /// Explicit entries may also target protected layers (the surgery stage
    /// decides whether to warn or fail); unknown ids are an error.
    pub fn resolve(&self, graph: &ModelGraph) -> Result<BTreeMap<String, f32>> {
        let mut resolved = BTreeMap::new();
        for (id, &rate) in &self.rates {
            let Some(node) = graph.node(id) else {
                return Err(Error::InvalidArgument(format!(
                    "rate names unknown layer {id}"
                )));
            };
            if !matches!(node.kind, LayerKind::Conv2d { .. }) {
                return Err(Error::InvalidArgument(format!(
                    "rate names non-conv layer {id}"
                )));
            }
            resolved.insert(id.clone(), rate);
        }
        if let Some(d) = self.default {
            for id in prunable_conv_layers(graph) {
                resolved.entry(id).or_insert(d);
            }
        }
        Ok(resolved)
    }
}

/// Keep the highest-scoring (count - floor(pr * count)) filters per layer.
/// Ties break toward the lower filter index. Never prunes to zero filters.
pub fn select_top_filters(
    graph: &ModelGraph,
    rank: &RankVector,
    rates: &BTreeMap<String, f32>,
) -> Result<PruningPlan> {
    let mut layers = Vec::new();
    // Iterate in graph order for a stable plan layout.
    for id in graph.conv_node_ids() {
        let Some(&rate) = rates.get(&id) else {
            continue;
        };
        if !(0.0 < rate && rate < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rate for {id} must be in (0,1), got {rate}"
            )));
        }
        let Some(scores) = rank.layer(&id) else {
            return Err(Error::InvalidArgument(format!(
                "rank vector has no scores for layer {id}"
            )));
        };
        let count = scores.scores.len();
        let remove = (f64::from(rate) * count as f64).floor() as usize;
        let keep = count.saturating_sub(remove).max(1);
        let mut order: Vec<usize> = (0..count).collect();
        order.sort_by(|&a, &b| {
            scores.scores[b]
                .partial_cmp(&scores.scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut kept: Vec<usize> = order[..keep].to_vec();
        kept.sort_unstable();
        layers.push(PlanLayer {
            layer_id: id,
            rate,
            kept,
        });
    }
    for id in rates.keys() {
        if graph.node(id).is_none() {
            return Err(Error::InvalidArgument(format!(
                "rate names unknown layer {id}"
            )));
        }
    }
    Ok(PruningPlan {
        method: rank.method,
        layers,
    })
}

// ---------------------------------------------------------------------------
// Surgery
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtectedPolicy {
    /// Rates on protected layers are an error.
    Error,
    /// Rates on protected layers are dropped with a warning.
    Warn,
}

pub struct PruneOutcome {
    pub graph: ModelGraph,
    pub weights: ModelWeights,
    pub report: FlopReport,
    pub warnings: Vec<String>,
}

/// Per-group surviving channel indices; groups not present keep everything.
struct KeptMaps {
    by_group: BTreeMap<usize, Vec<usize>>,
}

impl KeptMaps {
    fn kept_of<'a>(&'a self, group: usize, full: &'a [usize]) -> &'a [usize] {
        self.by_group.get(&group).map_or(full, Vec::as_slice)
    }
}

/// Validate a plan against the graph and split it into effective (prunable)
/// layers and warnings about protected ones.
fn effective_plan(
    graph: &ModelGraph,
    groups: &ChannelGroups,
    plan: &PruningPlan,
    policy: ProtectedPolicy,
) -> Result<(Vec<PlanLayer>, Vec<String>)> {
    let shapes = graph.infer_shapes()?;
    let mut effective = Vec::new();
    let mut warnings = Vec::new();
    for layer in &plan.layers {
        let Some(idx) = graph.index_of(&layer.layer_id) else {
            return Err(Error::InvalidArgument(format!(
                "plan names unknown layer {}",
                layer.layer_id
            )));
        };
        let node = &graph.nodes()[idx];
        let LayerKind::Conv2d { params, .. } = &node.kind else {
            return Err(Error::InvalidArgument(format!(
                "plan names non-conv layer {}",
                layer.layer_id
            )));
        };
        if layer.kept.is_empty()
            || layer.kept.windows(2).any(|w| w[0] >= w[1])
            || *layer.kept.last().unwrap() >= params.out_channels
        {
            return Err(Error::InvalidArgument(format!(
                "plan for {} has an invalid kept set",
                layer.layer_id
            )));
        }
        let NodeShape::Spatial { .. } = shapes[idx] else {
            unreachable!("conv output is spatial");
        };
        if layer.kept.len() == params.out_channels {
            // Keep-all entries are no-ops either way.
            continue;
        }
        if groups.is_protected(groups.group_of(idx)) {
            match policy {
                ProtectedPolicy::Error => {
                    return Err(Error::InvalidArgument(format!(
                        "layer {} is protected by residual or output structure and cannot be pruned",
                        layer.layer_id
                    )))
                }
                ProtectedPolicy::Warn => {
                    warnings.push(format!(
                        "ignoring rate {} on protected layer {}",
                        layer.rate, layer.layer_id
                    ));
                    continue;
                }
            }
        }
        effective.push(layer.clone());
    }
    Ok((effective, warnings))
}

fn kept_maps(graph: &ModelGraph, groups: &ChannelGroups, effective: &[PlanLayer]) -> KeptMaps {
    let mut by_group = BTreeMap::new();
    for layer in effective {
        let idx = graph.index_of(&layer.layer_id).expect("checked");
        by_group.insert(groups.group_of(idx), layer.kept.clone());
    }
    KeptMaps { by_group }
}

/// Features-per-channel multiplier seen by a dense layer fed (possibly
/// through ReLU chains) by `pred_idx`, plus that predecessor's group.
/// Global pooling keeps one feature per channel; flatten keeps h * w.
fn dense_input_origin(
    graph: &ModelGraph,
    shapes: &[NodeShape],
    groups: &ChannelGroups,
    pred_id: &str,
) -> (usize, usize, usize) {
    // Returns (group, channels, multiplier).
    let idx = graph.index_of(pred_id).expect("validated");
    let group = groups.group_of(idx);
    // Walk back through shape-preserving flat nodes to find the producer.
    let mut cursor = idx;
    loop {
        let node = &graph.nodes()[cursor];
        match node.kind {
            LayerKind::ReLU | LayerKind::Softmax => {
                let prev = &node.inputs[0];
                if prev == INPUT_ID {
                    break;
                }
                cursor = graph.index_of(prev).expect("validated");
            }
            _ => break,
        }
    }
    let node = &graph.nodes()[cursor];
    match &node.kind {
        LayerKind::GlobalAvgPool => {
            let NodeShape::Flat { features } = shapes[cursor] else {
                unreachable!()
            };
            (group, features, 1)
        }
        LayerKind::Flatten => {
            let src = &node.inputs[0];
            let spatial = if src == INPUT_ID {
                let (c, h, w) = graph.input_shape();
                NodeShape::Spatial { c, h, w }
            } else {
                shapes[graph.index_of(src).expect("validated")]
            };
            let NodeShape::Spatial { c, h, w } = spatial else {
                unreachable!("flatten input is spatial")
            };
            (group, c, h * w)
        }
        _ => {
            // A dense or other flat producer: its group is never pruned.
            let features = shapes[cursor].channels();
            (group, features, 1)
        }
    }
}

fn slice_conv_weight(weight: &Tensor, kept_out: &[usize], kept_in: &[usize]) -> Tensor {
    let shape = weight.shape();
    let (k_h, k_w) = (shape[2], shape[3]);
    let in_c = shape[1];
    let mut out = Tensor::zeros(&[kept_out.len(), kept_in.len(), k_h, k_w]);
    let src = weight.data();
    let dst = out.data_mut();
    let kernel = k_h * k_w;
    for (no, &o) in kept_out.iter().enumerate() {
        for (ni, &i) in kept_in.iter().enumerate() {
            let s = (o * in_c + i) * kernel;
            let d = (no * kept_in.len() + ni) * kernel;
            dst[d..d + kernel].copy_from_slice(&src[s..s + kernel]);
        }
    }
    out
}

fn slice_vector(v: &Tensor, kept: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(&[kept.len()]);
    for (n, &i) in kept.iter().enumerate() {
        out.data_mut()[n] = v.data()[i];
    }
    out
}

fn full_indices(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Rebuild the graph with pruned channel sets and transfer surviving weights.
pub fn construct_pruned(
    graph: &ModelGraph,
    weights: &ModelWeights,
    plan: &PruningPlan,
    policy: ProtectedPolicy,
) -> Result<PruneOutcome> {
    let groups = channel_groups(graph);
    let (effective, warnings) = effective_plan(graph, &groups, plan, policy)?;
    let maps = kept_maps(graph, &groups, &effective);
    let shapes = graph.infer_shapes()?;

    let channels_of = |id: &str| -> usize {
        if id == INPUT_ID {
            graph.input_shape().0
        } else {
            shapes[graph.index_of(id).expect("validated")].channels()
        }
    };
    let group_of_id = |id: &str| -> usize {
        if id == INPUT_ID {
            groups.input_group()
        } else {
            groups.group_of(graph.index_of(id).expect("validated"))
        }
    };

    let mut new_nodes = Vec::with_capacity(graph.nodes().len());
    let mut new_weights = ModelWeights::new();
    for (idx, node) in graph.nodes().iter().enumerate() {
        let own_group = groups.group_of(idx);
        let new_kind = match &node.kind {
            LayerKind::Conv2d { params, bias } => {
                let in_full = full_indices(channels_of(&node.inputs[0]));
                let out_full = full_indices(params.out_channels);
                let kept_in = maps.kept_of(group_of_id(&node.inputs[0]), &in_full);
                let kept_out = maps.kept_of(own_group, &out_full);
                let Some(NodeParams::Conv {
                    weight,
                    bias: bias_t,
                }) = weights.get(&node.id)
                else {
                    return Err(Error::InvalidGraph(format!("missing weights {}", node.id)));
                };
                new_weights.insert(
                    node.id.clone(),
                    NodeParams::Conv {
                        weight: slice_conv_weight(weight, kept_out, kept_in),
                        bias: bias_t.as_ref().map(|b| slice_vector(b, kept_out)),
                    },
                );
                LayerKind::Conv2d {
                    params: ConvParams {
                        in_channels: kept_in.len(),
                        out_channels: kept_out.len(),
                        ..params.clone()
                    },
                    bias: *bias,
                }
            }
            LayerKind::BatchNorm { channels } => {
                let full = full_indices(*channels);
                let kept = maps.kept_of(own_group, &full);
                let Some(NodeParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                }) = weights.get(&node.id)
                else {
                    return Err(Error::InvalidGraph(format!("missing weights {}", node.id)));
                };
                new_weights.insert(
                    node.id.clone(),
                    NodeParams::BatchNorm {
                        gamma: slice_vector(gamma, kept),
                        beta: slice_vector(beta, kept),
                        running_mean: slice_vector(running_mean, kept),
                        running_var: slice_vector(running_var, kept),
                    },
                );
                LayerKind::BatchNorm {
                    channels: kept.len(),
                }
            }
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                let (group, channels, mult) =
                    dense_input_origin(graph, &shapes, &groups, &node.inputs[0]);
                let full = full_indices(channels);
                let kept = maps.kept_of(group, &full);
                let Some(NodeParams::Dense { weight, bias }) = weights.get(&node.id) else {
                    return Err(Error::InvalidGraph(format!("missing weights {}", node.id)));
                };
                let new_in = kept.len() * mult;
                let mut w = Tensor::zeros(&[*out_features, new_in]);
                for o in 0..*out_features {
                    for (nc, &c) in kept.iter().enumerate() {
                        for m in 0..mult {
                            *w.at2_mut(o, nc * mult + m) = weight.at2(o, c * mult + m);
                        }
                    }
                }
                debug_assert_eq!(*in_features, channels * mult);
                new_weights.insert(
                    node.id.clone(),
                    NodeParams::Dense {
                        weight: w,
                        bias: bias.clone(),
                    },
                );
                LayerKind::Dense {
                    in_features: new_in,
                    out_features: *out_features,
                }
            }
            LayerKind::ChannelPad {
                out_channels,
                positions,
            } => {
                // Surviving input channels keep their original output slots,
                // so padded shortcuts stay aligned with the residual branch.
                let in_full = full_indices(channels_of(&node.inputs[0]));
                let kept_in = maps.kept_of(group_of_id(&node.inputs[0]), &in_full);
                LayerKind::ChannelPad {
                    out_channels: *out_channels,
                    positions: kept_in.iter().map(|&i| positions[i]).collect(),
                }
            }
            other => other.clone(),
        };
        new_nodes.push(Node {
            id: node.id.clone(),
            kind: new_kind,
            inputs: node.inputs.clone(),
        });
    }

    let pruned_graph = ModelGraph::new(new_nodes, graph.input_shape(), graph.num_classes())?;
    crate::graph::validate_weights(&pruned_graph, &new_weights)?;
    let baseline = count_flops_params(graph)?;
    let report = count_flops_params(&pruned_graph)?.with_baseline(&baseline);
    Ok(PruneOutcome {
        graph: pruned_graph,
        weights: new_weights,
        report,
        warnings,
    })
}

/// Index-map the surviving weights out of the original model. This is the
/// weight-transfer stage of surgery, exposed for direct checking; the graph
/// rebuild in [`construct_pruned`] uses exactly this mapping.
pub fn transfer_weights(
    graph: &ModelGraph,
    weights: &ModelWeights,
    plan: &PruningPlan,
    policy: ProtectedPolicy,
) -> Result<ModelWeights> {
    Ok(construct_pruned(graph, weights, plan, policy)?.weights)
}

/// A plan that keeps every filter of every prunable layer.
pub fn keep_all_plan(graph: &ModelGraph, method: RankMethod) -> PruningPlan {
    let mut layers = Vec::new();
    for node in graph.nodes() {
        if let LayerKind::Conv2d { params, .. } = &node.kind {
            layers.push(PlanLayer {
                layer_id: node.id.clone(),
                rate: 0.0,
                kept: full_indices(params.out_channels),
            });
        }
    }
    PruningPlan { method, layers }
}
