//! Shared oracles and generators for integration tests.
//!
//! Everything here recomputes results along an independent path from the
//! library: convolutions materialize padded tensors and windows, statistics
//! are two-pass textbook formulas, matrix rank comes from row reduction,
//! and gradients come from central differences.

#![allow(dead_code)]

use betarank_core::engine::{self, Activations, Mode};
use betarank_core::graph::{ModelGraph, ModelWeights, Node, NodeParams, INPUT_ID};
use betarank_core::layers::{ConvParams, LayerKind, BN_EPS};
use betarank_core::pruning::PruningPlan;
use betarank_core::ranking;
use betarank_core::rng::Rng;
use betarank_core::tensor::{Scalar, Tensor};

// ---------------------------------------------------------------------------
// Naive forward pass
// ---------------------------------------------------------------------------

fn pad_input(x: &Tensor, padding: usize) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[n, c, h + 2 * padding, w + 2 * padding]);
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    *out.at4_mut(i, ch, y + padding, xx + padding) = x.at4(i, ch, y, xx);
                }
            }
        }
    }
    out
}

fn naive_conv(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, p: &ConvParams) -> Tensor {
    let padded = pad_input(x, p.padding);
    let s = padded.shape();
    let (n, c, ph, pw) = (s[0], s[1], s[2], s[3]);
    let oh = (ph - p.kernel_h) / p.stride + 1;
    let ow = (pw - p.kernel_w) / p.stride + 1;
    let mut out = Tensor::zeros(&[n, p.out_channels, oh, ow]);
    for i in 0..n {
        for k in 0..p.out_channels {
            for y in 0..oh {
                for xx in 0..ow {
                    // Window-major accumulation order, unlike the engine.
                    let mut acc = 0.0f32;
                    for ky in 0..p.kernel_h {
                        for kx in 0..p.kernel_w {
                            for ch in 0..c {
                                acc += padded.at4(i, ch, y * p.stride + ky, xx * p.stride + kx)
                                    * weight.at4(k, ch, ky, kx);
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b.data()[k];
                    }
                    *out.at4_mut(i, k, y, xx) = acc;
                }
            }
        }
    }
    out
}

/// Evaluate the whole graph with naive per-layer implementations
/// (inference-mode batch norm). Returns every node output.
pub fn naive_forward(graph: &ModelGraph, weights: &ModelWeights, input: &Tensor) -> Vec<Tensor> {
    let mut outs: Vec<Tensor> = Vec::new();
    for node in graph.nodes() {
        let fetch = |slot: usize| -> &Tensor {
            let id = &node.inputs[slot];
            if id == INPUT_ID {
                input
            } else {
                &outs[graph.index_of(id).unwrap()]
            }
        };
        let out = match &node.kind {
            LayerKind::Conv2d { params, .. } => {
                let Some(NodeParams::Conv { weight, bias }) = weights.get(&node.id) else {
                    panic!("missing conv weights")
                };
                naive_conv(fetch(0), weight, bias.as_ref(), params)
            }
            LayerKind::BatchNorm { .. } => {
                let Some(NodeParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                }) = weights.get(&node.id)
                else {
                    panic!("missing bn weights")
                };
                let x = fetch(0);
                let s = x.shape();
                let mut out = Tensor::zeros(s);
                for i in 0..s[0] {
                    for ch in 0..s[1] {
                        let inv = 1.0 / (running_var.data()[ch] + BN_EPS as f32).sqrt();
                        for y in 0..s[2] {
                            for xx in 0..s[3] {
                                *out.at4_mut(i, ch, y, xx) = (x.at4(i, ch, y, xx)
                                    - running_mean.data()[ch])
                                    * inv
                                    * gamma.data()[ch]
                                    + beta.data()[ch];
                            }
                        }
                    }
                }
                out
            }
            LayerKind::ReLU => {
                let x = fetch(0);
                let mut out = Tensor::zeros(x.shape());
                for (o, v) in out.data_mut().iter_mut().zip(x.data()) {
                    *o = if *v > 0.0 { *v } else { 0.0 };
                }
                out
            }
            LayerKind::MaxPool { kernel, stride } => {
                let x = fetch(0);
                let s = x.shape();
                let oh = (s[2] - kernel) / stride + 1;
                let ow = (s[3] - kernel) / stride + 1;
                let mut out = Tensor::zeros(&[s[0], s[1], oh, ow]);
                for i in 0..s[0] {
                    for ch in 0..s[1] {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut m = f32::NEG_INFINITY;
                                for ky in 0..*kernel {
                                    for kx in 0..*kernel {
                                        m = m.max(x.at4(i, ch, y * stride + ky, xx * stride + kx));
                                    }
                                }
                                *out.at4_mut(i, ch, y, xx) = m;
                            }
                        }
                    }
                }
                out
            }
            LayerKind::AvgPool { kernel, stride } => {
                let x = fetch(0);
                let s = x.shape();
                let oh = (s[2] - kernel) / stride + 1;
                let ow = (s[3] - kernel) / stride + 1;
                let mut out = Tensor::zeros(&[s[0], s[1], oh, ow]);
                for i in 0..s[0] {
                    for ch in 0..s[1] {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut acc = 0.0f32;
                                for ky in 0..*kernel {
                                    for kx in 0..*kernel {
                                        acc += x.at4(i, ch, y * stride + ky, xx * stride + kx);
                                    }
                                }
                                *out.at4_mut(i, ch, y, xx) = acc / (kernel * kernel) as f32;
                            }
                        }
                    }
                }
                out
            }
            LayerKind::GlobalAvgPool => {
                let x = fetch(0);
                let s = x.shape();
                let mut out = Tensor::zeros(&[s[0], s[1]]);
                for i in 0..s[0] {
                    for ch in 0..s[1] {
                        let mut acc = 0.0f32;
                        for y in 0..s[2] {
                            for xx in 0..s[3] {
                                acc += x.at4(i, ch, y, xx);
                            }
                        }
                        *out.at2_mut(i, ch) = acc / (s[2] * s[3]) as f32;
                    }
                }
                out
            }
            LayerKind::Flatten => {
                let x = fetch(0);
                let s = x.shape();
                x.reshaped(&[s[0], s[1] * s[2] * s[3]]).unwrap()
            }
            LayerKind::Dense { .. } => {
                let Some(NodeParams::Dense { weight, bias }) = weights.get(&node.id) else {
                    panic!("missing dense weights")
                };
                let x = fetch(0);
                let (n, in_f) = (x.shape()[0], x.shape()[1]);
                let out_f = weight.shape()[0];
                let mut out = Tensor::zeros(&[n, out_f]);
                for i in 0..n {
                    for o in 0..out_f {
                        let mut acc = bias.data()[o];
                        for j in 0..in_f {
                            acc += x.at2(i, j) * weight.at2(o, j);
                        }
                        *out.at2_mut(i, o) = acc;
                    }
                }
                out
            }
            LayerKind::Add => {
                let a = fetch(0).clone();
                let b = fetch(1);
                let mut out = a;
                for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
                    *o += *v;
                }
                out
            }
            LayerKind::ChannelPad {
                out_channels,
                positions,
            } => {
                let x = fetch(0);
                let s = x.shape();
                let mut out = Tensor::zeros(&[s[0], *out_channels, s[2], s[3]]);
                for i in 0..s[0] {
                    for (ci, &co) in positions.iter().enumerate() {
                        for y in 0..s[2] {
                            for xx in 0..s[3] {
                                *out.at4_mut(i, co, y, xx) = x.at4(i, ci, y, xx);
                            }
                        }
                    }
                }
                out
            }
            LayerKind::Softmax => {
                let x = fetch(0);
                let (n, k) = (x.shape()[0], x.shape()[1]);
                let mut out = Tensor::zeros(x.shape());
                for i in 0..n {
                    let m = (0..k).map(|c| x.at2(i, c)).fold(f32::NEG_INFINITY, f32::max);
                    let z: f32 = (0..k).map(|c| (x.at2(i, c) - m).exp()).sum();
                    for c in 0..k {
                        *out.at2_mut(i, c) = (x.at2(i, c) - m).exp() / z;
                    }
                }
                out
            }
        };
        outs.push(out);
    }
    outs
}

// ---------------------------------------------------------------------------
// Window-enumeration score oracle
// ---------------------------------------------------------------------------

pub struct OracleLayerScores {
    pub layer_id: String,
    pub sigma_in: f64,
    pub sigma_out: Vec<f64>,
    pub l1: Vec<f64>,
    pub beta_scores: Vec<f64>,
}

/// Literal enumeration of input windows and output regions for every conv
/// layer: L1 by direct summation, deviations by two-pass mean/variance over
/// samples per element, position means, and the ratio composition.
pub fn beta_oracle(graph: &ModelGraph, weights: &ModelWeights, batch: &Tensor) -> Vec<OracleLayerScores> {
    let outs = naive_forward(graph, weights, batch);
    let mut layers = Vec::new();
    for (idx, node) in graph.nodes().iter().enumerate() {
        let LayerKind::Conv2d { params, .. } = &node.kind else {
            continue;
        };
        let input = if node.inputs[0] == INPUT_ID {
            batch
        } else {
            &outs[graph.index_of(&node.inputs[0]).unwrap()]
        };
        let output = &outs[idx];
        let padded = pad_input(input, params.padding);
        let ps = padded.shape();
        let (n, c) = (ps[0], ps[1]);
        let os = output.shape();
        let (out_c, oh, ow) = (os[1], os[2], os[3]);

        // sigma_in: per position, per window element, deviation across the
        // batch; pooled squared deviations over N * |window| values.
        let window_elems = (c * params.kernel_h * params.kernel_w) as f64;
        let mut sigma_in_positions = Vec::new();
        for y in 0..oh {
            for x in 0..ow {
                let mut pooled_sq = 0.0f64;
                for ch in 0..c {
                    for ky in 0..params.kernel_h {
                        for kx in 0..params.kernel_w {
                            let vals: Vec<f64> = (0..n)
                                .map(|i| {
                                    f64::from(padded.at4(
                                        i,
                                        ch,
                                        y * params.stride + ky,
                                        x * params.stride + kx,
                                    ))
                                })
                                .collect();
                            let mean = vals.iter().sum::<f64>() / n as f64;
                            pooled_sq += vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                        }
                    }
                }
                sigma_in_positions.push((pooled_sq / (n as f64 * window_elems)).sqrt());
            }
        }
        let sigma_in =
            sigma_in_positions.iter().sum::<f64>() / sigma_in_positions.len() as f64;

        // sigma_out per filter: scalar output region, std across the batch.
        let mut sigma_out = Vec::with_capacity(out_c);
        for k in 0..out_c {
            let mut acc = 0.0f64;
            for y in 0..oh {
                for x in 0..ow {
                    let vals: Vec<f64> =
                        (0..n).map(|i| f64::from(output.at4(i, k, y, x))).collect();
                    let mean = vals.iter().sum::<f64>() / n as f64;
                    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / n as f64;
                    acc += var.sqrt();
                }
            }
            sigma_out.push(acc / (oh * ow) as f64);
        }

        // L1 by direct enumeration of kernel entries.
        let Some(NodeParams::Conv { weight, .. }) = weights.get(&node.id) else {
            panic!()
        };
        let per_filter = weight.len() / out_c;
        let l1: Vec<f64> = (0..out_c)
            .map(|k| {
                weight.data()[k * per_filter..(k + 1) * per_filter]
                    .iter()
                    .map(|v| f64::from(v.abs()))
                    .sum()
            })
            .collect();

        let beta_scores: Vec<f64> = (0..out_c)
            .map(|k| l1[k] * (sigma_out[k] / sigma_in.max(1e-12)))
            .collect();
        layers.push(OracleLayerScores {
            layer_id: node.id.clone(),
            sigma_in,
            sigma_out,
            l1,
            beta_scores,
        });
    }
    layers
}

/// Row-reduction rank with sigma_max from power iteration; the comparison
/// tolerance matches the library's formula.
pub fn rank_oracle(map: &[f64], h: usize, w: usize) -> usize {
    let mut x = vec![1.0f64; w];
    for _ in 0..200 {
        let mut y = vec![0.0f64; h];
        for r in 0..h {
            for c in 0..w {
                y[r] += map[r * w + c] * x[c];
            }
        }
        let mut z = vec![0.0f64; w];
        for c in 0..w {
            for r in 0..h {
                z[c] += map[r * w + c] * y[r];
            }
        }
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0;
        }
        for (xv, zv) in x.iter_mut().zip(&z) {
            *xv = zv / norm;
        }
    }
    let mut y = vec![0.0f64; h];
    for r in 0..h {
        for c in 0..w {
            y[r] += map[r * w + c] * x[c];
        }
    }
    let sigma_max = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if sigma_max == 0.0 {
        return 0;
    }
    let tol = h.max(w) as f64 * f64::from(f32::EPSILON) * sigma_max;
    let mut a = map.to_vec();
    let mut rank = 0usize;
    let mut row = 0usize;
    for col in 0..w {
        let mut best = row;
        for r in row..h {
            if a[r * w + col].abs() > a[best * w + col].abs() {
                best = r;
            }
        }
        if a[best * w + col].abs() <= tol {
            continue;
        }
        if best != row {
            for c in 0..w {
                a.swap(row * w + c, best * w + c);
            }
        }
        let pivot = a[row * w + col];
        for r in (row + 1)..h {
            let factor = a[r * w + col] / pivot;
            for c in col..w {
                a[r * w + c] -= factor * a[row * w + c];
            }
        }
        rank += 1;
        row += 1;
        if row == h {
            break;
        }
    }
    rank
}

/// HRank oracle: naive forward to the post-activation maps, then the
/// row-reduction rank, averaged over the batch.
pub fn hrank_oracle(graph: &ModelGraph, weights: &ModelWeights, batch: &Tensor) -> Vec<(String, Vec<f64>)> {
    let outs = naive_forward(graph, weights, batch);
    let targets = ranking::post_activation_targets(graph);
    let mut result = Vec::new();
    for (conv_idx, target_idx) in targets {
        let conv_id = graph.nodes()[conv_idx].id.clone();
        let fmap = &outs[target_idx];
        let s = fmap.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut scores = Vec::with_capacity(c);
        for k in 0..c {
            let mut acc = 0.0f64;
            for i in 0..n {
                let mut m = vec![0.0f64; h * w];
                for y in 0..h {
                    for x in 0..w {
                        m[y * w + x] = f64::from(fmap.at4(i, k, y, x));
                    }
                }
                acc += rank_oracle(&m, h, w) as f64;
            }
            scores.push(acc / n as f64);
        }
        result.push((conv_id, scores));
    }
    result.sort_by(|a, b| {
        graph
            .index_of(&a.0)
            .unwrap()
            .cmp(&graph.index_of(&b.0).unwrap())
    });
    result
}

// ---------------------------------------------------------------------------
// Channel-masking oracle for surgery equivalence
// ---------------------------------------------------------------------------

/// Zero the pruned filters in place AND the downstream weight slices that
/// consumed them, walking the graph independently of the library's channel
/// grouping. The masked model's logits must equal the surgically pruned
/// model's logits.
pub fn mask_oracle_weights(
    graph: &ModelGraph,
    weights: &ModelWeights,
    plan: &PruningPlan,
) -> ModelWeights {
    let mut masked = weights.clone();
    for layer in &plan.layers {
        let idx = graph.index_of(&layer.layer_id).unwrap();
        let LayerKind::Conv2d { params, .. } = &graph.nodes()[idx].kind else {
            panic!("plan names non-conv layer")
        };
        let removed: Vec<usize> = (0..params.out_channels)
            .filter(|i| !layer.kept.contains(i))
            .collect();
        if removed.is_empty() {
            continue;
        }
        // Zero the filter itself.
        if let Some(NodeParams::Conv { weight, bias }) = masked.get_mut(&layer.layer_id) {
            let per_filter = weight.len() / params.out_channels;
            for &k in &removed {
                for v in &mut weight.data_mut()[k * per_filter..(k + 1) * per_filter] {
                    *v = 0.0;
                }
                if let Some(b) = bias.as_mut() {
                    b.data_mut()[k] = 0.0;
                }
            }
        }
        // Walk consumers, zeroing slices that read the removed channels.
        // Each queue entry: (node index, channel indices in that node's
        // input indexing, features-per-channel multiplier).
        let mut queue: Vec<(usize, Vec<usize>, usize)> = graph
            .consumers(idx)
            .into_iter()
            .map(|c| (c, removed.clone(), 1usize))
            .collect();
        while let Some((nidx, chans, mult)) = queue.pop() {
            let node = &graph.nodes()[nidx];
            match &node.kind {
                LayerKind::Conv2d { params, .. } => {
                    if let Some(NodeParams::Conv { weight, .. }) = masked.get_mut(&node.id) {
                        let (k_out, c_in, kh, kw) = (
                            weight.shape()[0],
                            weight.shape()[1],
                            weight.shape()[2],
                            weight.shape()[3],
                        );
                        let _ = params;
                        for k in 0..k_out {
                            for &c in &chans {
                                debug_assert!(c < c_in);
                                let base = (k * c_in + c) * kh * kw;
                                for v in &mut weight.data_mut()[base..base + kh * kw] {
                                    *v = 0.0;
                                }
                            }
                        }
                    }
                }
                LayerKind::Dense { .. } => {
                    if let Some(NodeParams::Dense { weight, .. }) = masked.get_mut(&node.id) {
                        let out_f = weight.shape()[0];
                        for o in 0..out_f {
                            for &c in &chans {
                                for m in 0..mult {
                                    *weight.at2_mut(o, c * mult + m) = 0.0;
                                }
                            }
                        }
                    }
                }
                LayerKind::Flatten => {
                    // Feature blocks of h*w per channel.
                    let src = &node.inputs[0];
                    let shapes = graph.infer_shapes().unwrap();
                    let spatial = if src == INPUT_ID {
                        let (c, h, w) = graph.input_shape();
                        betarank_core::graph::NodeShape::Spatial { c, h, w }
                    } else {
                        shapes[graph.index_of(src).unwrap()]
                    };
                    let betarank_core::graph::NodeShape::Spatial { h, w, .. } = spatial else {
                        panic!()
                    };
                    for c in graph.consumers(nidx) {
                        queue.push((c, chans.clone(), mult * h * w));
                    }
                }
                LayerKind::BatchNorm { .. }
                | LayerKind::ReLU
                | LayerKind::MaxPool { .. }
                | LayerKind::AvgPool { .. }
                | LayerKind::GlobalAvgPool
                | LayerKind::Softmax => {
                    for c in graph.consumers(nidx) {
                        queue.push((c, chans.clone(), mult));
                    }
                }
                LayerKind::ChannelPad { positions, .. } => {
                    let mapped: Vec<usize> = chans.iter().map(|&c| positions[c]).collect();
                    for c in graph.consumers(nidx) {
                        queue.push((c, mapped.clone(), mult));
                    }
                }
                LayerKind::Add => {
                    panic!("mask oracle reached a residual add; plan pruned a protected layer")
                }
            }
        }
    }
    masked
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (f64)
// ---------------------------------------------------------------------------

/// Max relative error between analytic gradients and central differences,
/// for every parameter tensor and the input. The objective is
/// dot(final output, seed).
pub fn gradcheck_max_rel_error(
    graph: &ModelGraph,
    weights: &ModelWeights<f64>,
    input: &Tensor<f64>,
    seed: &Tensor<f64>,
) -> f64 {
    let (rel, at) = gradcheck_worst(graph, weights, input, seed);
    if rel >= 1e-4 {
        eprintln!("gradcheck worst offender: {at} (rel {rel:.3e})");
    }
    rel
}

pub fn gradcheck_worst(
    graph: &ModelGraph,
    weights: &ModelWeights<f64>,
    input: &Tensor<f64>,
    seed: &Tensor<f64>,
) -> (f64, String) {
    let objective = |w: &ModelWeights<f64>, x: &Tensor<f64>| -> f64 {
        let acts = engine::forward_cached(graph, w, x, Mode::Train).unwrap();
        acts.logits()
            .data()
            .iter()
            .zip(seed.data())
            .map(|(a, s)| a * s)
            .sum()
    };
    let acts: Activations<f64> = engine::forward_cached(graph, weights, input, Mode::Train).unwrap();
    let result = engine::backprop(graph, weights, &acts, seed).unwrap();

    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut check = |analytic: f64, numeric: f64, at: &dyn Fn() -> String| {
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        let rel = (analytic - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = format!("{} analytic {analytic:.6e} numeric {numeric:.6e}", at());
        }
    };
    let h = 1e-5;

    // Parameters.
    let ids: Vec<String> = weights.iter().map(|(id, _)| id.clone()).collect();
    for id in ids {
        let grads = result.param_grads.get(&id);
        let tensor_roles: Vec<&'static str> = weights
            .get(&id)
            .unwrap()
            .tensors()
            .iter()
            .map(|(r, _)| *r)
            .collect();
        for role in tensor_roles {
            if role == "running_mean" || role == "running_var" {
                continue; // constants in train mode
            }
            let len = tensor_of(weights.get(&id).unwrap(), role).len();
            for i in 0..len {
                let analytic = grads
                    .map(|g| tensor_of(g, role).data()[i])
                    .unwrap_or(0.0);
                let mut wp = weights.clone();
                bump(&mut wp, &id, role, i, h);
                let up = objective(&wp, input);
                let mut wm = weights.clone();
                bump(&mut wm, &id, role, i, -h);
                let down = objective(&wm, input);
                check(analytic, (up - down) / (2.0 * h), &|| {
                    format!("{id}.{role}[{i}]")
                });
            }
        }
    }
    // Input.
    for i in 0..input.len() {
        let analytic = result.input_grad.data()[i];
        let mut xp = input.clone();
        xp.data_mut()[i] += h;
        let up = objective(weights, &xp);
        let mut xm = input.clone();
        xm.data_mut()[i] -= h;
        let down = objective(weights, &xm);
        check(analytic, (up - down) / (2.0 * h), &|| format!("input[{i}]"));
    }
    (max_rel, worst)
}

fn tensor_of<'a>(p: &'a NodeParams<f64>, role: &str) -> &'a Tensor<f64> {
    p.tensors()
        .into_iter()
        .find(|(r, _)| *r == role)
        .map(|(_, t)| t)
        .unwrap()
}

fn bump(weights: &mut ModelWeights<f64>, id: &str, role: &str, index: usize, delta: f64) {
    let p = weights.get_mut(id).unwrap();
    let t: &mut Tensor<f64> = match (p, role) {
        (NodeParams::Conv { weight, .. }, "weight") => weight,
        (NodeParams::Conv { bias, .. }, "bias") => bias.as_mut().unwrap(),
        (NodeParams::BatchNorm { gamma, .. }, "gamma") => gamma,
        (NodeParams::BatchNorm { beta, .. }, "beta") => beta,
        (NodeParams::Dense { weight, .. }, "weight") => weight,
        (NodeParams::Dense { bias, .. }, "bias") => bias,
        _ => panic!("unknown role {role}"),
    };
    t.data_mut()[index] += delta;
}

// ---------------------------------------------------------------------------
// Random model generators
// ---------------------------------------------------------------------------

pub struct RandomModel {
    pub graph: ModelGraph,
    pub weights: ModelWeights,
}

/// A random stack of 1..=3 conv layers with optional BN/ReLU between,
/// spatial size 5..=9, channels 1..=4, kernel 1 or 3, stride 1..=2.
pub fn random_conv_stack(rng: &mut Rng) -> RandomModel {
    let n_convs = 1 + rng.below(3);
    let mut in_c = 1 + rng.below(3);
    let hw = 5 + rng.below(5);
    let input_shape = (in_c, hw, hw);
    let mut nodes: Vec<Node> = Vec::new();
    let mut prev = INPUT_ID.to_string();
    let mut cur_hw = hw;
    for i in 0..n_convs {
        let kernel = if cur_hw >= 3 && rng.below(2) == 1 { 3 } else { 1 };
        let padding = if kernel == 3 { rng.below(2) } else { 0 };
        let stride = if cur_hw >= 6 { 1 + rng.below(2) } else { 1 };
        let out_c = 1 + rng.below(4);
        let cid = format!("c{i}");
        nodes.push(Node {
            id: cid.clone(),
            kind: LayerKind::Conv2d {
                params: ConvParams {
                    kernel_h: kernel,
                    kernel_w: kernel,
                    stride,
                    padding,
                    in_channels: in_c,
                    out_channels: out_c,
                },
                bias: rng.below(2) == 0,
            },
            inputs: vec![prev.clone()],
        });
        prev = cid;
        cur_hw = (cur_hw + 2 * padding - kernel) / stride + 1;
        in_c = out_c;
        if rng.below(2) == 0 {
            let bid = format!("b{i}");
            nodes.push(Node {
                id: bid.clone(),
                kind: LayerKind::BatchNorm { channels: in_c },
                inputs: vec![prev.clone()],
            });
            prev = bid;
        }
        if rng.below(2) == 0 {
            let rid = format!("r{i}");
            nodes.push(Node {
                id: rid.clone(),
                kind: LayerKind::ReLU,
                inputs: vec![prev.clone()],
            });
            prev = rid;
        }
    }
    nodes.push(Node {
        id: "gap".into(),
        kind: LayerKind::GlobalAvgPool,
        inputs: vec![prev],
    });
    nodes.push(Node {
        id: "fc".into(),
        kind: LayerKind::Dense {
            in_features: in_c,
            out_features: 2,
        },
        inputs: vec!["gap".into()],
    });
    let graph = ModelGraph::new(nodes, input_shape, 2).unwrap();
    let weights = randomize_weights(&graph, rng);
    RandomModel { graph, weights }
}

/// He-style random weights plus randomized BN statistics so inference-mode
/// batch norm is non-trivial.
pub fn randomize_weights(graph: &ModelGraph, rng: &mut Rng) -> ModelWeights {
    let mut weights = betarank_core::graph::init_weights(graph, rng.next_u64()).unwrap();
    for (_, p) in weights.iter_mut() {
        if let NodeParams::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        } = p
        {
            for v in gamma.data_mut() {
                *v = 0.5 + rng.next_f32();
            }
            for v in beta.data_mut() {
                *v = rng.normal_f32() * 0.3;
            }
            for v in running_mean.data_mut() {
                *v = rng.normal_f32() * 0.2;
            }
            for v in running_var.data_mut() {
                *v = 0.5 + rng.next_f32();
            }
        }
        if let NodeParams::Conv { bias: Some(b), .. } = p {
            for v in b.data_mut() {
                *v = rng.normal_f32() * 0.1;
            }
        }
    }
    weights
}

/// VGG-flavored toy: conv/bn/relu(/pool) chains ending in flatten or global
/// pooling and one or two dense layers.
pub fn random_vgg_toy(rng: &mut Rng) -> RandomModel {
    let mut nodes: Vec<Node> = Vec::new();
    let in_c = 1 + rng.below(3);
    let hw = 8;
    let mut prev = INPUT_ID.to_string();
    let mut c = in_c;
    let mut cur = hw;
    let stages = 2 + rng.below(2);
    for i in 0..stages {
        let out_c = 2 + rng.below(5);
        let cid = format!("conv{i}");
        nodes.push(Node {
            id: cid.clone(),
            kind: LayerKind::Conv2d {
                params: ConvParams {
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    padding: 1,
                    in_channels: c,
                    out_channels: out_c,
                },
                bias: rng.below(2) == 0,
            },
            inputs: vec![prev.clone()],
        });
        prev = cid;
        c = out_c;
        if rng.below(2) == 0 {
            let bid = format!("bn{i}");
            nodes.push(Node {
                id: bid.clone(),
                kind: LayerKind::BatchNorm { channels: c },
                inputs: vec![prev.clone()],
            });
            prev = bid;
        }
        let rid = format!("relu{i}");
        nodes.push(Node {
            id: rid.clone(),
            kind: LayerKind::ReLU,
            inputs: vec![prev.clone()],
        });
        prev = rid;
        if cur >= 4 && rng.below(2) == 0 {
            let pid = format!("pool{i}");
            nodes.push(Node {
                id: pid.clone(),
                kind: LayerKind::MaxPool { kernel: 2, stride: 2 },
                inputs: vec![prev.clone()],
            });
            prev = pid;
            cur /= 2;
        }
    }
    let use_flatten = rng.below(2) == 0;
    if use_flatten {
        nodes.push(Node {
            id: "flat".into(),
            kind: LayerKind::Flatten,
            inputs: vec![prev.clone()],
        });
        nodes.push(Node {
            id: "fc".into(),
            kind: LayerKind::Dense {
                in_features: c * cur * cur,
                out_features: 3,
            },
            inputs: vec!["flat".into()],
        });
    } else {
        nodes.push(Node {
            id: "gap".into(),
            kind: LayerKind::GlobalAvgPool,
            inputs: vec![prev.clone()],
        });
        nodes.push(Node {
            id: "fc".into(),
            kind: LayerKind::Dense {
                in_features: c,
                out_features: 3,
            },
            inputs: vec!["gap".into()],
        });
    }
    let graph = ModelGraph::new(nodes, (in_c, hw, hw), 3).unwrap();
    let weights = randomize_weights(&graph, rng);
    RandomModel { graph, weights }
}

/// Residual toy: stem + two stages of basic blocks with a padded shortcut
/// on the downsampling block.
pub fn random_resnet_toy(rng: &mut Rng) -> RandomModel {
    let in_c = 1 + rng.below(2);
    let hw = 8;
    let w1 = 4;
    let w2 = 8;
    let mut nodes = vec![
        Node {
            id: "stem".into(),
            kind: LayerKind::Conv2d {
                params: ConvParams {
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    padding: 1,
                    in_channels: in_c,
                    out_channels: w1,
                },
                bias: false,
            },
            inputs: vec![INPUT_ID.into()],
        },
        Node {
            id: "stem.bn".into(),
            kind: LayerKind::BatchNorm { channels: w1 },
            inputs: vec!["stem".into()],
        },
        Node {
            id: "stem.relu".into(),
            kind: LayerKind::ReLU,
            inputs: vec!["stem.bn".into()],
        },
    ];
    let mut prev = "stem.relu".to_string();
    let mut prev_c = w1;
    let blocks_s1 = 1 + rng.below(2);
    for (stage, width) in [(1usize, w1), (2usize, w2)] {
        let blocks = if stage == 1 { blocks_s1 } else { 1 };
        for b in 0..blocks {
            let base = format!("s{stage}b{b}");
            let downsample = stage == 2 && b == 0;
            let stride = if downsample { 2 } else { 1 };
            nodes.push(Node {
                id: format!("{base}.conv1"),
                kind: LayerKind::Conv2d {
                    params: ConvParams {
                        kernel_h: 3,
                        kernel_w: 3,
                        stride,
                        padding: 1,
                        in_channels: prev_c,
                        out_channels: width,
                    },
                    bias: false,
                },
                inputs: vec![prev.clone()],
            });
            nodes.push(Node {
                id: format!("{base}.bn1"),
                kind: LayerKind::BatchNorm { channels: width },
                inputs: vec![format!("{base}.conv1")],
            });
            nodes.push(Node {
                id: format!("{base}.relu1"),
                kind: LayerKind::ReLU,
                inputs: vec![format!("{base}.bn1")],
            });
            nodes.push(Node {
                id: format!("{base}.conv2"),
                kind: LayerKind::Conv2d {
                    params: ConvParams {
                        kernel_h: 3,
                        kernel_w: 3,
                        stride: 1,
                        padding: 1,
                        in_channels: width,
                        out_channels: width,
                    },
                    bias: false,
                },
                inputs: vec![format!("{base}.relu1")],
            });
            nodes.push(Node {
                id: format!("{base}.bn2"),
                kind: LayerKind::BatchNorm { channels: width },
                inputs: vec![format!("{base}.conv2")],
            });
            let shortcut = if downsample {
                nodes.push(Node {
                    id: format!("{base}.short.pool"),
                    kind: LayerKind::AvgPool { kernel: 1, stride: 2 },
                    inputs: vec![prev.clone()],
                });
                let pad = (width - prev_c) / 2;
                nodes.push(Node {
                    id: format!("{base}.short.pad"),
                    kind: LayerKind::ChannelPad {
                        out_channels: width,
                        positions: (0..prev_c).map(|i| i + pad).collect(),
                    },
                    inputs: vec![format!("{base}.short.pool")],
                });
                format!("{base}.short.pad")
            } else {
                prev.clone()
            };
            nodes.push(Node {
                id: format!("{base}.add"),
                kind: LayerKind::Add,
                inputs: vec![format!("{base}.bn2"), shortcut],
            });
            nodes.push(Node {
                id: format!("{base}.relu2"),
                kind: LayerKind::ReLU,
                inputs: vec![format!("{base}.add")],
            });
            prev = format!("{base}.relu2");
            prev_c = width;
        }
    }
    nodes.push(Node {
        id: "gap".into(),
        kind: LayerKind::GlobalAvgPool,
        inputs: vec![prev],
    });
    nodes.push(Node {
        id: "fc".into(),
        kind: LayerKind::Dense {
            in_features: prev_c,
            out_features: 3,
        },
        inputs: vec!["gap".into()],
    });
    let graph = ModelGraph::new(nodes, (in_c, hw, hw), 3).unwrap();
    let weights = randomize_weights(&graph, rng);
    RandomModel { graph, weights }
}

/// A random plan over the prunable layers: arbitrary surviving subsets, not
/// just top-k, to stress index bookkeeping.
pub fn random_plan(graph: &ModelGraph, rng: &mut Rng) -> PruningPlan {
    use betarank_core::pruning::{prunable_conv_layers, PlanLayer};
    use betarank_core::ranking::RankMethod;
    let mut layers = Vec::new();
    for id in prunable_conv_layers(graph) {
        let Some(LayerKind::Conv2d { params, .. }) = graph.node(&id).map(|n| &n.kind) else {
            continue;
        };
        let count = params.out_channels;
        let keep = 1 + rng.below(count);
        let mut kept = rng.sample_without_replacement(count, keep);
        kept.sort_unstable();
        layers.push(PlanLayer {
            layer_id: id,
            rate: 1.0 - keep as f32 / count as f32,
            kept,
        });
    }
    PruningPlan {
        method: RankMethod::L1,
        layers,
    }
}

pub fn random_batch(rng: &mut Rng, shape: (usize, usize, usize), n: usize) -> Tensor {
    let (c, h, w) = shape;
    let mut t = Tensor::zeros(&[n, c, h, w]);
    for v in t.data_mut() {
        *v = rng.next_f32();
    }
    t
}

pub fn assert_close(a: f64, b: f64, rel_tol: f64, context: &str) {
    let denom = a.abs().max(b.abs()).max(1e-9);
    let rel = (a - b).abs() / denom;
    assert!(rel <= rel_tol, "{context}: {a} vs {b} (rel {rel:.3e})");
}

pub fn max_rel_diff<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let (x, y) = (x.to_f64(), y.to_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(1e-6)
        })
        .fold(0.0, f64::max)
}
