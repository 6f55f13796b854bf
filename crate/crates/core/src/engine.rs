//! Graph execution: forward passes, reverse-mode differentiation, and the
//! momentum-SGD update.
//!
//! Two forward flavors exist. [`forward_cached`] keeps every node output and
//! feeds backprop; [`forward_streaming`] frees each activation as soon as its
//! last consumer has run, which bounds the inference memory high-water mark
//! and lets observers tap intermediate tensors without retaining the lot.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ModelWeights, Node, NodeParams, INPUT_ID};
use crate::layers::{self, BnBatchStats, LayerKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses stored running statistics.
    Infer,
    /// Batch norm normalizes with the current batch statistics.
    Train,
}

/// All node outputs of one forward pass, in node order.
pub struct Activations<S: Scalar = f32> {
    pub input: Tensor<S>,
    pub outputs: Vec<Tensor<S>>,
    /// Batch statistics for batch-norm nodes run in train mode.
    pub bn_stats: Vec<Option<BnBatchStats<S>>>,
    pub mode: Mode,
}

impl<S: Scalar> Activations<S> {
    pub fn logits(&self) -> &Tensor<S> {
        self.outputs.last().expect("graph has nodes")
    }

    pub fn output_of(&self, idx: usize) -> &Tensor<S> {
        &self.outputs[idx]
    }
}

fn node_weights<'w, S: Scalar>(
    weights: &'w ModelWeights<S>,
    node: &Node,
) -> Result<Option<&'w NodeParams<S>>> {
    match node.kind {
        LayerKind::Conv2d { .. } | LayerKind::BatchNorm { .. } | LayerKind::Dense { .. } => {
            match weights.get(&node.id) {
                Some(p) => Ok(Some(p)),
                None => Err(Error::InvalidGraph(format!(
                    "missing weights for node {}",
                    node.id
                ))),
            }
        }
        _ => Ok(None),
    }
}

/// Run one node. `inputs` are the resolved predecessor outputs.
pub fn eval_node<S: Scalar>(
    node: &Node,
    params: Option<&NodeParams<S>>,
    inputs: &[&Tensor<S>],
    mode: Mode,
) -> Result<(Tensor<S>, Option<BnBatchStats<S>>)> {
    let out = match (&node.kind, params) {
        (LayerKind::Conv2d { params: cp, .. }, Some(NodeParams::Conv { weight, bias })) => (
            layers::conv2d_forward(inputs[0], weight, bias.as_ref(), cp)?,
            None,
        ),
        (
            LayerKind::BatchNorm { .. },
            Some(NodeParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            }),
        ) => match mode {
            Mode::Infer => (
                layers::batchnorm_infer(
                    inputs[0],
                    gamma.data(),
                    beta.data(),
                    running_mean.data(),
                    running_var.data(),
                )?,
                None,
            ),
            Mode::Train => {
                let (out, stats) = layers::batchnorm_train(inputs[0], gamma.data(), beta.data())?;
                (out, Some(stats))
            }
        },
        (LayerKind::ReLU, _) => (layers::relu(inputs[0]), None),
        (LayerKind::MaxPool { kernel, stride }, _) => {
            (layers::maxpool_forward(inputs[0], *kernel, *stride)?, None)
        }
        (LayerKind::AvgPool { kernel, stride }, _) => {
            (layers::avgpool_forward(inputs[0], *kernel, *stride)?, None)
        }
        (LayerKind::GlobalAvgPool, _) => (layers::global_avgpool(inputs[0])?, None),
        (LayerKind::Flatten, _) => (layers::flatten(inputs[0])?, None),
        (LayerKind::Dense { .. }, Some(NodeParams::Dense { weight, bias })) => {
            (layers::dense_forward(inputs[0], weight, bias)?, None)
        }
        (LayerKind::Add, _) => (layers::add_forward(inputs[0], inputs[1])?, None),
        (
            LayerKind::ChannelPad {
                out_channels,
                positions,
            },
            _,
        ) => (
            layers::channel_pad_forward(inputs[0], *out_channels, positions)?,
            None,
        ),
        (LayerKind::Softmax, _) => (layers::softmax(inputs[0])?, None),
        (kind, _) => {
            return Err(Error::Unsupported(format!(
                "node {} of kind {} has mismatched weights",
                node.id,
                kind.name()
            )))
        }
    };
    Ok(out)
}

/// Forward pass retaining every node output.
pub fn forward_cached<S: Scalar>(
    graph: &ModelGraph,
    weights: &ModelWeights<S>,
    input: &Tensor<S>,
    mode: Mode,
) -> Result<Activations<S>> {
    let mut outputs: Vec<Tensor<S>> = Vec::with_capacity(graph.nodes().len());
    let mut bn_stats = Vec::with_capacity(graph.nodes().len());
    for node in graph.nodes() {
        let resolved: Vec<&Tensor<S>> = node
            .inputs
            .iter()
            .map(|id| {
                if id == INPUT_ID {
                    input
                } else {
                    &outputs[graph.index_of(id).expect("validated")]
                }
            })
            .collect();
        let (out, stats) = eval_node(node, node_weights(weights, node)?, &resolved, mode)?;
        outputs.push(out);
        bn_stats.push(stats);
    }
    Ok(Activations {
        input: input.clone(),
        outputs,
        bn_stats,
        mode,
    })
}

/// Forward pass that frees activations once their consumers have run.
/// The observer sees each node with its resolved inputs and fresh output.
pub fn forward_streaming<S: Scalar>(
    graph: &ModelGraph,
    weights: &ModelWeights<S>,
    input: &Tensor<S>,
    mut observe: impl FnMut(usize, &Node, &[&Tensor<S>], &Tensor<S>),
) -> Result<Tensor<S>> {
    let nodes = graph.nodes();
    // Remaining-consumer counts; the last node is also the external output.
    let mut remaining: Vec<usize> = (0..nodes.len())
        .map(|i| graph.consumers(i).len())
        .collect();
    if let Some(last) = remaining.last_mut() {
        *last += 1;
    }
    let mut slots: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
    for (i, node) in nodes.iter().enumerate() {
        let resolved: Vec<&Tensor<S>> = node
            .inputs
            .iter()
            .map(|id| {
                if id == INPUT_ID {
                    input
                } else {
                    slots[graph.index_of(id).expect("validated")]
                        .as_ref()
                        .expect("live activation")
                }
            })
            .collect();
        let (out, _) = eval_node(node, node_weights(weights, node)?, &resolved, Mode::Infer)?;
        observe(i, node, &resolved, &out);
        slots[i] = Some(out);
        for id in &node.inputs {
            if id == INPUT_ID {
                continue;
            }
            let j = graph.index_of(id).expect("validated");
            remaining[j] -= 1;
            if remaining[j] == 0 {
                slots[j] = None;
            }
        }
    }
    Ok(slots.pop().flatten().expect("last node output retained"))
}

/// Inference logits for a batch.
pub fn forward_logits<S: Scalar>(
    graph: &ModelGraph,
    weights: &ModelWeights<S>,
    input: &Tensor<S>,
) -> Result<Tensor<S>> {
    forward_streaming(graph, weights, input, |_, _, _, _| {})
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_ce_loss<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
) -> Result<(f64, Tensor<S>)> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "softmax cross-entropy",
            expected: format!("[{}, classes]", labels.len()),
            got: format!("{:?}", logits.shape()),
        });
    }
    let batch = labels.len();
    let classes = logits.shape()[1];
    let probs = layers::softmax(logits)?;
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(logits.shape());
    let inv_n = S::from_f64(1.0 / batch as f64);
    for (n, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        loss -= probs.at2(n, label).to_f64().max(1e-45).ln();
        for c in 0..classes {
            let indicator = if c == label { S::ONE } else { S::ZERO };
            *grad.at2_mut(n, c) = (probs.at2(n, c) - indicator) * inv_n;
        }
    }
    Ok((loss / batch as f64, grad))
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Gradients per parametric node, mirroring [`ModelWeights`] layout.
pub type ParamGrads<S> = BTreeMap<String, NodeParams<S>>;

pub struct BackpropResult<S: Scalar> {
    pub param_grads: ParamGrads<S>,
    /// Gradient of the objective at each node output (node order). Nodes the
    /// objective does not depend on stay `None`.
    pub node_grads: Vec<Option<Tensor<S>>>,
    /// Gradient at the graph input.
    pub input_grad: Tensor<S>,
}

/// Reverse pass seeded with an arbitrary gradient at the final node output.
/// Training seeds with the loss gradient; attribution seeds with a one-hot.
pub fn backprop<S: Scalar>(
    graph: &ModelGraph,
    weights: &ModelWeights<S>,
    acts: &Activations<S>,
    seed: &Tensor<S>,
) -> Result<BackpropResult<S>> {
    let nodes = graph.nodes();
    let last = nodes.len() - 1;
    if seed.shape() != acts.outputs[last].shape() {
        return Err(Error::ShapeMismatch {
            context: "backprop seed",
            expected: format!("{:?}", acts.outputs[last].shape()),
            got: format!("{:?}", seed.shape()),
        });
    }
    let mut final_grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
    let mut working: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
    let mut input_grad = Tensor::zeros(acts.input.shape());
    let mut param_grads: ParamGrads<S> = BTreeMap::new();
    working[last] = Some(seed.clone());
    for i in (0..nodes.len()).rev() {
        let Some(grad_out) = working[i].take() else {
            continue;
        };
        let node = &nodes[i];
        let pushes = backprop_node(graph, weights, acts, i, node, &grad_out, &mut param_grads)?;
        final_grads[i] = Some(grad_out);
        for (slot, grad) in pushes {
            let target = &node.inputs[slot];
            if target == INPUT_ID {
                accumulate(&mut input_grad, &grad)?;
            } else {
                let j = graph.index_of(target).expect("validated");
                match working[j].as_mut() {
                    Some(existing) => accumulate(existing, &grad)?,
                    None => working[j] = Some(grad),
                }
            }
        }
    }
    Ok(BackpropResult {
        param_grads,
        node_grads: final_grads,
        input_grad,
    })
}

fn accumulate<S: Scalar>(into: &mut Tensor<S>, from: &Tensor<S>) -> Result<()> {
    if into.shape() != from.shape() {
        return Err(Error::ShapeMismatch {
            context: "gradient accumulation",
            expected: format!("{:?}", into.shape()),
            got: format!("{:?}", from.shape()),
        });
    }
    for (a, b) in into.data_mut().iter_mut().zip(from.data()) {
        *a += *b;
    }
    Ok(())
}

fn backprop_node<S: Scalar>(
    graph: &ModelGraph,
    weights: &ModelWeights<S>,
    acts: &Activations<S>,
    idx: usize,
    node: &Node,
    grad_out: &Tensor<S>,
    param_grads: &mut ParamGrads<S>,
) -> Result<Vec<(usize, Tensor<S>)>> {
    let input_tensor = |slot: usize| -> &Tensor<S> {
        let id = &node.inputs[slot];
        if id == INPUT_ID {
            &acts.input
        } else {
            &acts.outputs[graph.index_of(id).expect("validated")]
        }
    };
    let mut pushes: Vec<(usize, Tensor<S>)> = Vec::new();
    match &node.kind {
        LayerKind::Conv2d { params, bias } => {
            let Some(NodeParams::Conv { weight, .. }) = weights.get(&node.id) else {
                return Err(Error::InvalidGraph(format!("missing weights {}", node.id)));
            };
            let (dx, dw, db) =
                layers::conv2d_backward(input_tensor(0), weight, *bias, params, grad_out)?;
            param_grads.insert(node.id.clone(), NodeParams::Conv { weight: dw, bias: db });
            pushes.push((0, dx));
        }
        LayerKind::BatchNorm { .. } => {
            let Some(NodeParams::BatchNorm {
                gamma,
                running_mean,
                running_var,
                ..
            }) = weights.get(&node.id)
            else {
                return Err(Error::InvalidGraph(format!("missing weights {}", node.id)));
            };
            let (dx, dg, db) = match (acts.mode, &acts.bn_stats[idx]) {
                (Mode::Train, Some(stats)) => {
                    layers::batchnorm_train_backward(input_tensor(0), gamma.data(), stats, grad_out)?
                }
                _ => layers::batchnorm_infer_backward(
                    input_tensor(0),
                    gamma.data(),
                    running_mean.data(),
                    running_var.data(),
                    grad_out,
                )?,
            };
            let c = dg.len();
            param_grads.insert(
                node.id.clone(),
                NodeParams::BatchNorm {
                    gamma: Tensor::from_vec(vec![c], dg)?,
                    beta: Tensor::from_vec(vec![c], db)?,
                    running_mean: Tensor::zeros(&[c]),
                    running_var: Tensor::zeros(&[c]),
                },
            );
            pushes.push((0, dx));
        }
        LayerKind::ReLU => pushes.push((0, layers::relu_backward(input_tensor(0), grad_out))),
        LayerKind::MaxPool { kernel, stride } => pushes.push((
            0,
            layers::maxpool_backward(input_tensor(0), *kernel, *stride, grad_out)?,
        )),
        LayerKind::AvgPool { kernel, stride } => pushes.push((
            0,
            layers::avgpool_backward(input_tensor(0).shape(), *kernel, *stride, grad_out)?,
        )),
        LayerKind::GlobalAvgPool => pushes.push((
            0,
            layers::global_avgpool_backward(input_tensor(0).shape(), grad_out)?,
        )),
        LayerKind::Flatten => pushes.push((0, grad_out.reshaped(input_tensor(0).shape())?)),
        LayerKind::Dense { .. } => {
            let Some(NodeParams::Dense { weight, .. }) = weights.get(&node.id) else {
                return Err(Error::InvalidGraph(format!("missing weights {}", node.id)));
            };
            let (dx, dw, db) = layers::dense_backward(input_tensor(0), weight, grad_out)?;
            param_grads.insert(node.id.clone(), NodeParams::Dense { weight: dw, bias: db });
            pushes.push((0, dx));
        }
        LayerKind::Add => {
            pushes.push((0, grad_out.clone()));
            pushes.push((1, grad_out.clone()));
        }
        LayerKind::ChannelPad { positions, .. } => pushes.push((
            0,
            layers::channel_pad_backward(input_tensor(0).shape(), positions, grad_out),
        )),
        LayerKind::Softmax => pushes.push((
            0,
            layers::softmax_backward(&acts.outputs[idx], grad_out),
        )),
    }
    Ok(pushes)
}

/// Loss + gradients for a labelled batch. Checks for divergence and names the
/// first node whose activations went non-finite.
pub fn loss_and_grads<S: Scalar>(
    graph: &ModelGraph,
    weights: &ModelWeights<S>,
    acts: &Activations<S>,
    labels: &[usize],
) -> Result<(f64, ParamGrads<S>)> {
    let (loss, grad) = softmax_ce_loss(acts.logits(), labels)?;
    if !loss.is_finite() {
        let node = acts
            .outputs
            .iter()
            .zip(graph.nodes())
            .find(|(t, _)| !t.all_finite())
            .map(|(_, n)| n.id.clone())
            .unwrap_or_else(|| "loss".into());
        return Err(Error::DivergedLoss { epoch: 0, node });
    }
    let result = backprop(graph, weights, acts, &grad)?;
    Ok((loss, result.param_grads))
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

/// Momentum buffers, same layout as the weights.
pub type MomentumState<S> = BTreeMap<String, NodeParams<S>>;

fn sgd_tensor<S: Scalar>(
    w: &mut Tensor<S>,
    g: &Tensor<S>,
    v: &mut Tensor<S>,
    lr: S,
    momentum: S,
    weight_decay: S,
) -> Result<()> {
    if w.shape() != g.shape() {
        return Err(Error::ShapeMismatch {
            context: "sgd update",
            expected: format!("{:?}", w.shape()),
            got: format!("{:?}", g.shape()),
        });
    }
    for ((w, g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
        let step = *g + weight_decay * *w;
        *v = momentum * *v + step;
        *w -= lr * *v;
    }
    Ok(())
}

/// Standard momentum SGD: v <- m v + (g + wd w); w <- w - lr v.
/// With lr = 0 weights are bitwise unchanged.
pub fn sgd_step<S: Scalar>(
    weights: &mut ModelWeights<S>,
    grads: &ParamGrads<S>,
    momentum_state: &mut MomentumState<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::InvalidArgument("learning rate must be >= 0".into()));
    }
    let lr_s = S::from_f64(lr);
    let m_s = S::from_f64(momentum);
    let wd_s = S::from_f64(weight_decay);
    for (id, grad) in grads.iter() {
        let Some(param) = weights.get_mut(id) else {
            return Err(Error::InvalidGraph(format!("gradient for unknown node {id}")));
        };
        let buf = momentum_state
            .entry(id.clone())
            .or_insert_with(|| zero_like(param));
        match (param, grad, buf) {
            (
                NodeParams::Conv { weight, bias },
                NodeParams::Conv {
                    weight: gw,
                    bias: gb,
                },
                NodeParams::Conv {
                    weight: vw,
                    bias: vb,
                },
            ) => {
                sgd_tensor(weight, gw, vw, lr_s, m_s, wd_s)?;
                if let (Some(b), Some(gb), Some(vb)) = (bias.as_mut(), gb.as_ref(), vb.as_mut()) {
                    sgd_tensor(b, gb, vb, lr_s, m_s, wd_s)?;
                }
            }
            (
                NodeParams::BatchNorm { gamma, beta, .. },
                NodeParams::BatchNorm {
                    gamma: gg,
                    beta: gb,
                    ..
                },
                NodeParams::BatchNorm {
                    gamma: vg,
                    beta: vb,
                    ..
                },
            ) => {
                sgd_tensor(gamma, gg, vg, lr_s, m_s, wd_s)?;
                sgd_tensor(beta, gb, vb, lr_s, m_s, wd_s)?;
            }
            (
                NodeParams::Dense { weight, bias },
                NodeParams::Dense {
                    weight: gw,
                    bias: gb,
                },
                NodeParams::Dense {
                    weight: vw,
                    bias: vb,
                },
            ) => {
                sgd_tensor(weight, gw, vw, lr_s, m_s, wd_s)?;
                sgd_tensor(bias, gb, vb, lr_s, m_s, wd_s)?;
            }
            _ => {
                return Err(Error::InvalidGraph(format!(
                    "gradient kind mismatch for node {id}"
                )))
            }
        }
    }
    Ok(())
}

fn zero_like<S: Scalar>(p: &NodeParams<S>) -> NodeParams<S> {
    match p {
        NodeParams::Conv { weight, bias } => NodeParams::Conv {
            weight: Tensor::zeros(weight.shape()),
            bias: bias.as_ref().map(|b| Tensor::zeros(b.shape())),
        },
        NodeParams::BatchNorm { gamma, beta, .. } => NodeParams::BatchNorm {
            gamma: Tensor::zeros(gamma.shape()),
            beta: Tensor::zeros(beta.shape()),
            running_mean: Tensor::zeros(gamma.shape()),
            running_var: Tensor::zeros(beta.shape()),
        },
        NodeParams::Dense { weight, bias } => NodeParams::Dense {
            weight: Tensor::zeros(weight.shape()),
            bias: Tensor::zeros(bias.shape()),
        },
    }
}

/// Fold freshly observed batch statistics into running statistics.
/// running <- momentum * running + (1 - momentum) * batch.
pub fn update_running_stats<S: Scalar>(
    weights: &mut ModelWeights<S>,
    graph: &ModelGraph,
    acts: &Activations<S>,
    momentum: f64,
) -> Result<()> {
    let m = S::from_f64(momentum);
    let one_minus = S::from_f64(1.0 - momentum);
    for (i, node) in graph.nodes().iter().enumerate() {
        let Some(stats) = &acts.bn_stats[i] else {
            continue;
        };
        let Some(NodeParams::BatchNorm {
            running_mean,
            running_var,
            ..
        }) = weights.get_mut(&node.id)
        else {
            return Err(Error::InvalidGraph(format!("missing weights {}", node.id)));
        };
        for (r, b) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = m * *r + one_minus * *b;
        }
        for (r, b) in running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = m * *r + one_minus * *b;
        }
    }
    Ok(())
}
