//! Per-filter importance scores.
//!
//! Three methods are implemented behind one result type:
//!
//! * `l1`: the sum of absolute filter weights.
//! * `beta`: the L1 score multiplied by the filter's output/input window
//!   standard-deviation ratio, measured on a calibration batch. The ratio is
//!   formed from position-averaged standard deviations; sigma_out is
//!   computed per filter on the raw pre-activation conv output, sigma_in
//!   pools every input window element across the batch. Padding
//!   participates as zeros, exactly as the convolution sees it.
//! * `hrank`: the batch-averaged numerical rank of each filter's
//!   post-activation feature map.
//!
//! All three are deterministic given the batch seed recorded in the result.

use std::collections::BTreeMap;

use crate::engine;
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ModelWeights};
use crate::layers::LayerKind;
use crate::tensor::Tensor;

/// Guard against division by a zero input deviation.
pub const SIGMA_EPS: f32 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankMethod {
    L1,
    Beta,
    HRank,
}

impl RankMethod {
    pub fn name(self) -> &'static str {
        match self {
            RankMethod::L1 => "l1",
            RankMethod::Beta => "beta",
            RankMethod::HRank => "hrank",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(RankMethod::L1),
            "beta" => Ok(RankMethod::Beta),
            "hrank" => Ok(RankMethod::HRank),
            other => Err(Error::InvalidArgument(format!(
                "unknown ranking method {other:?} (expected l1, beta, or hrank)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRanks {
    pub layer_id: String,
    pub scores: Vec<f32>,
}

/// Importance scores for every conv layer, plus the batch seed they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RankVector {
    pub method: RankMethod,
    pub layers: Vec<LayerRanks>,
    pub batch_seed: u64,
}

impl RankVector {
    pub fn layer(&self, id: &str) -> Option<&LayerRanks> {
        self.layers.iter().find(|l| l.layer_id == id)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_id,filter_index,score,method,batch_seed\n");
        for layer in &self.layers {
            for (i, s) in layer.scores.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    layer.layer_id,
                    i,
                    s,
                    self.method.name(),
                    self.batch_seed
                ));
            }
        }
        out
    }

    pub fn from_csv(text: &str, path: &str) -> Result<Self> {
        let mut method: Option<RankMethod> = None;
        let mut batch_seed = 0u64;
        let mut layers: Vec<LayerRanks> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || lineno == 0 {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Parse {
                    path: path.into(),
                    message: format!("line {}: expected 5 fields", lineno + 1),
                });
            }
            let perr = |message: String| Error::Parse {
                path: path.into(),
                message: format!("line {}: {message}", lineno + 1),
            };
            let layer_id = fields[0].to_string();
            let index: usize = fields[1]
                .parse()
                .map_err(|_| perr(format!("bad filter index {:?}", fields[1])))?;
            let score: f32 = fields[2]
                .parse()
                .map_err(|_| perr(format!("bad score {:?}", fields[2])))?;
            let m = RankMethod::parse(fields[3]).map_err(|e| perr(e.to_string()))?;
            if *method.get_or_insert(m) != m {
                return Err(perr("mixed methods in one file".into()));
            }
            batch_seed = fields[4]
                .parse()
                .map_err(|_| perr(format!("bad batch seed {:?}", fields[4])))?;
            match layers.last_mut() {
                Some(l) if l.layer_id == layer_id => {
                    if l.scores.len() != index {
                        return Err(perr(format!(
                            "filter index {index} out of order for layer {layer_id}"
                        )));
                    }
                    l.scores.push(score);
                }
                _ => {
                    if index != 0 {
                        return Err(perr(format!(
                            "layer {layer_id} must start at filter 0"
                        )));
                    }
                    layers.push(LayerRanks {
                        layer_id,
                        scores: vec![score],
                    });
                }
            }
        }
        Ok(RankVector {
            method: method.ok_or_else(|| Error::Parse {
                path: path.into(),
                message: "no rank rows".into(),
            })?,
            layers,
            batch_seed,
        })
    }
}

// ---------------------------------------------------------------------------
// Position count and window statistics
// ---------------------------------------------------------------------------

/// Number of window placements along each axis for the given geometry:
/// floor((n - n') / s) + 1, equivalently ceil((n - n' + 1) / s).
pub fn position_count(
    geometry: (usize, usize),
    window: (usize, usize),
    stride: usize,
) -> Result<(usize, usize)> {
    let (n, m) = geometry;
    let (wn, wm) = window;
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if wn > n || wm > m {
        return Err(Error::InvalidArgument(format!(
            "window {wn}x{wm} larger than layer {n}x{m}"
        )));
    }
    Ok(((n - wn) / stride + 1, (m - wm) / stride + 1))
}

/// Window standard deviations of one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWindowStats {
    pub layer_id: String,
    /// Input-window deviation, pooled over every window element and sample,
    /// averaged over positions.
    pub sigma_in: f32,
    /// Output deviation per filter, across samples, averaged over positions.
    pub sigma_out: Vec<f32>,
    pub position_count: (usize, usize),
}

impl LayerWindowStats {
    /// Deviation ratio for one filter, the multiplier applied to L1 scores.
    pub fn beta_fraction(&self, filter: usize) -> f32 {
        self.sigma_out[filter] / self.sigma_in.max(SIGMA_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowStats {
    pub layers: Vec<LayerWindowStats>,
}

impl WindowStats {
    pub fn layer(&self, id: &str) -> Option<&LayerWindowStats> {
        self.layers.iter().find(|l| l.layer_id == id)
    }
}

/// Compute per-conv-layer window statistics over a batch of N >= 2 samples.
pub fn window_stats(
    graph: &ModelGraph,
    weights: &ModelWeights,
    batch: &Tensor,
) -> Result<WindowStats> {
    if batch.shape().len() != 4 || batch.shape()[0] < 2 {
        return Err(Error::InvalidArgument(
            "window statistics need a batch of at least 2 samples".into(),
        ));
    }
    let mut layers: Vec<LayerWindowStats> = Vec::new();
    engine::forward_streaming(graph, weights, batch, |_, node, inputs, output| {
        if let LayerKind::Conv2d { params, .. } = &node.kind {
            layers.push(conv_window_stats(
                &node.id, inputs[0], output, params,
            ));
        }
    })?;
    Ok(WindowStats { layers })
}

fn conv_window_stats(
    layer_id: &str,
    input: &Tensor,
    output: &Tensor,
    params: &crate::layers::ConvParams,
) -> LayerWindowStats {
    let ishape = input.shape();
    let (batch, in_c, in_h, in_w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let oshape = output.shape();
    let (out_c, out_h, out_w) = (oshape[1], oshape[2], oshape[3]);
    let pad = params.padding as isize;
    let window_elems = (batch * in_c * params.kernel_h * params.kernel_w) as f64;

    // sigma_in at a position: each window element is centered by its own
    // across-batch mean; squared deviations pool over all elements and
    // samples (divisor N * |window|). Only across-sample spread counts, so
    // a batch of identical samples yields exactly zero. Out-of-range taps
    // are padding zeros and still participate.
    let mut sigma_in_sum = 0.0f64;
    let inv_batch = 1.0 / batch as f64;
    for oh in 0..out_h {
        for ow in 0..out_w {
            let ih0 = (oh * params.stride) as isize - pad;
            let iw0 = (ow * params.stride) as isize - pad;
            let mut pooled_var = 0.0f64;
            for c in 0..in_c {
                for kh in 0..params.kernel_h {
                    let ih = ih0 + kh as isize;
                    for kw in 0..params.kernel_w {
                        let iw = iw0 + kw as isize;
                        let out_of_range =
                            ih < 0 || ih >= in_h as isize || iw < 0 || iw >= in_w as isize;
                        if out_of_range {
                            continue; // constant zero: no across-sample spread
                        }
                        let mut sum = 0.0f64;
                        let mut sumsq = 0.0f64;
                        for n in 0..batch {
                            let v = f64::from(input.at4(n, c, ih as usize, iw as usize));
                            sum += v;
                            sumsq += v * v;
                        }
                        let mean = sum * inv_batch;
                        pooled_var += (sumsq * inv_batch - mean * mean).max(0.0);
                    }
                }
            }
            sigma_in_sum += (pooled_var * batch as f64 / window_elems).sqrt();
        }
    }
    let positions = (out_h * out_w) as f64;
    let sigma_in = (sigma_in_sum / positions) as f32;

    // sigma_out per filter: deviation across the batch at each position.
    let inv_n = 1.0 / batch as f64;
    let mut sigma_out = vec![0.0f32; out_c];
    for (k, out_slot) in sigma_out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut sum = 0.0f64;
                let mut sumsq = 0.0f64;
                for n in 0..batch {
                    let v = f64::from(output.at4(n, k, oh, ow));
                    sum += v;
                    sumsq += v * v;
                }
                let mean = sum * inv_n;
                let var = (sumsq * inv_n - mean * mean).max(0.0);
                acc += var.sqrt();
            }
        }
        *out_slot = (acc / positions) as f32;
    }

    LayerWindowStats {
        layer_id: layer_id.to_string(),
        sigma_in,
        sigma_out,
        position_count: (out_h, out_w),
    }
}

// ---------------------------------------------------------------------------
// L1 and beta scores
// ---------------------------------------------------------------------------

/// Sum of absolute kernel weights, one score per filter.
pub fn l1_scores(conv_weight: &Tensor) -> Vec<f32> {
    let filters = conv_weight.shape()[0];
    let per_filter = conv_weight.len() / filters;
    let data = conv_weight.data();
    (0..filters)
        .map(|k| {
            data[k * per_filter..(k + 1) * per_filter]
                .iter()
                .map(|v| v.abs())
                .sum()
        })
        .collect()
}

/// L1 scores for every conv layer. No batch involved; the seed is recorded
/// anyway so downstream artifacts carry uniform provenance.
pub fn l1_rank(graph: &ModelGraph, weights: &ModelWeights, batch_seed: u64) -> Result<RankVector> {
    let mut layers = Vec::new();
    for id in graph.conv_node_ids() {
        let w = weights.conv_weight(&id)?;
        layers.push(LayerRanks {
            layer_id: id,
            scores: l1_scores(w),
        });
    }
    Ok(RankVector {
        method: RankMethod::L1,
        layers,
        batch_seed,
    })
}

/// L1 weighted by the output/input deviation ratio.
pub fn beta_rank(
    graph: &ModelGraph,
    weights: &ModelWeights,
    batch: &Tensor,
    batch_seed: u64,
) -> Result<RankVector> {
    let stats = window_stats(graph, weights, batch)?;
    let mut layers = Vec::new();
    for layer_stats in &stats.layers {
        let w = weights.conv_weight(&layer_stats.layer_id)?;
        let l1 = l1_scores(w);
        let scores = l1
            .iter()
            .enumerate()
            .map(|(k, &l1k)| l1k * layer_stats.beta_fraction(k))
            .collect();
        layers.push(LayerRanks {
            layer_id: layer_stats.layer_id.clone(),
            scores,
        });
    }
    Ok(RankVector {
        method: RankMethod::Beta,
        layers,
        batch_seed,
    })
}

// ---------------------------------------------------------------------------
// HRank-style scores
// ---------------------------------------------------------------------------

/// For each conv node, the node whose output is that conv's post-activation
/// feature map: the end of the longest chain of single-consumer batch-norm /
/// ReLU nodes that follows it.
pub fn post_activation_targets(graph: &ModelGraph) -> BTreeMap<usize, usize> {
    let mut map = BTreeMap::new();
    for (i, node) in graph.nodes().iter().enumerate() {
        if !matches!(node.kind, LayerKind::Conv2d { .. }) {
            continue;
        }
        let mut cursor = i;
        loop {
            let consumers = graph.consumers(cursor);
            if consumers.len() != 1 {
                break;
            }
            let next = consumers[0];
            match graph.nodes()[next].kind {
                LayerKind::BatchNorm { .. } | LayerKind::ReLU => cursor = next,
                _ => break,
            }
        }
        map.insert(i, cursor);
    }
    map
}

/// Batch-averaged numerical rank of each filter's feature map.
pub fn hrank_score(
    graph: &ModelGraph,
    weights: &ModelWeights,
    batch: &Tensor,
    batch_seed: u64,
) -> Result<RankVector> {
    if batch.shape().len() != 4 || batch.shape()[0] == 0 {
        return Err(Error::InvalidArgument(
            "rank scores need a non-empty batch".into(),
        ));
    }
    let targets = post_activation_targets(graph);
    // target node index -> conv ids that map onto it (chains are unique per
    // conv, but two convs can share no target by construction).
    let mut wanted: BTreeMap<usize, String> = BTreeMap::new();
    for (conv_idx, target_idx) in &targets {
        wanted.insert(*target_idx, graph.nodes()[*conv_idx].id.clone());
    }
    let mut scored: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    engine::forward_streaming(graph, weights, batch, |idx, _, _, output| {
        if let Some(conv_id) = wanted.get(&idx) {
            let shape = output.shape();
            let (n_batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let mut scores = vec![0.0f32; c];
            for (k, slot) in scores.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for n in 0..n_batch {
                    let mut map = vec![0.0f64; h * w];
                    for y in 0..h {
                        for x in 0..w {
                            map[y * w + x] = f64::from(output.at4(n, k, y, x));
                        }
                    }
                    acc += numerical_rank_f64(&map, h, w) as f64;
                }
                *slot = (acc / n_batch as f64) as f32;
            }
            scored.insert(conv_id.clone(), scores);
        }
    })?;
    // Preserve conv order.
    let mut layers = Vec::new();
    for id in graph.conv_node_ids() {
        let scores = scored.remove(&id).ok_or_else(|| {
            Error::InvalidGraph(format!("no feature map scored for conv {id}"))
        })?;
        layers.push(LayerRanks {
            layer_id: id,
            scores,
        });
    }
    Ok(RankVector {
        method: RankMethod::HRank,
        layers,
        batch_seed,
    })
}

/// Numerical rank of an h x w matrix given as f32 values.
pub fn numerical_rank(map: &[f32], h: usize, w: usize) -> usize {
    let as_f64: Vec<f64> = map.iter().map(|&v| f64::from(v)).collect();
    numerical_rank_f64(&as_f64, h, w)
}

/// Count of singular values above max(h, w) * eps32 * sigma_max.
pub fn numerical_rank_f64(map: &[f64], h: usize, w: usize) -> usize {
    let svs = singular_values(map, h, w);
    let Some(&max_sv) = svs.first() else {
        return 0;
    };
    if max_sv <= 0.0 {
        return 0;
    }
    let tol = h.max(w) as f64 * f64::from(f32::EPSILON) * max_sv;
    svs.iter().filter(|&&s| s > tol).count()
}

/// Singular values by one-sided Jacobi, descending.
pub fn singular_values(matrix: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(matrix.len(), rows * cols);
    // Work on columns; transpose if needed so rows >= cols.
    let (m, n, mut a) = if rows >= cols {
        (rows, cols, matrix.to_vec())
    } else {
        let mut t = vec![0.0f64; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = matrix[r * cols + c];
            }
        }
        (cols, rows, t)
    };
    // a is m x n row-major.
    let col_dot = |a: &[f64], p: usize, q: usize| -> f64 {
        let mut s = 0.0;
        for r in 0..m {
            s += a[r * n + p] * a[r * n + q];
        }
        s
    };
    let max_sweeps = 60;
    let rel_tol = 1e-12;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let app = col_dot(&a, p, p);
                let aqq = col_dot(&a, q, q);
                let apq = col_dot(&a, p, q);
                if apq.abs() <= rel_tol * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let vp = a[r * n + p];
                    let vq = a[r * n + q];
                    a[r * n + p] = c * vp - s * vq;
                    a[r * n + q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut svs: Vec<f64> = (0..n).map(|p| col_dot(&a, p, p).sqrt()).collect();
    svs.sort_by(|x, y| y.partial_cmp(x).unwrap());
    svs
}

// ---------------------------------------------------------------------------
// Group statistics over filter partitions
// ---------------------------------------------------------------------------

/// Mean L1, deviation ratio, and combined score over two disjoint filter
/// groups of one layer. Each aggregate is the arithmetic mean of per-filter
/// values; in particular the combined aggregate is mean(l1_k * beta_k), not
/// the product of the two means.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub l1_major: f32,
    pub l1_minor: f32,
    pub beta_major: f32,
    pub beta_minor: f32,
    pub betarank_major: f32,
    pub betarank_minor: f32,
    pub major: Vec<usize>,
    pub minor: Vec<usize>,
}

pub fn group_stats(
    l1: &[f32],
    stats: &LayerWindowStats,
    major: &[usize],
    minor: &[usize],
) -> Result<GroupStats> {
    if major.is_empty() || minor.is_empty() {
        return Err(Error::InvalidArgument("empty filter group".into()));
    }
    if major.iter().any(|i| minor.contains(i)) {
        return Err(Error::InvalidArgument("overlapping filter groups".into()));
    }
    let filters = l1.len();
    if major.iter().chain(minor).any(|&i| i >= filters) {
        return Err(Error::InvalidArgument("filter index out of range".into()));
    }
    let mean = |idx: &[usize], f: &dyn Fn(usize) -> f32| -> f32 {
        idx.iter().map(|&i| f(i)).sum::<f32>() / idx.len() as f32
    };
    let beta = |i: usize| stats.beta_fraction(i);
    let combined = |i: usize| l1[i] * stats.beta_fraction(i);
    Ok(GroupStats {
        l1_major: mean(major, &|i| l1[i]),
        l1_minor: mean(minor, &|i| l1[i]),
        beta_major: mean(major, &beta),
        beta_minor: mean(minor, &beta),
        betarank_major: mean(major, &combined),
        betarank_minor: mean(minor, &combined),
        major: major.to_vec(),
        minor: minor.to_vec(),
    })
}
