//! Ranking stability, class-activation heatmaps, and the host inference
//! benchmark (time + peak tensor allocation).

use std::time::Instant;

use crate::dataio::{sample_batch, Dataset};
use crate::engine::{backprop, forward_cached, forward_logits, Mode};
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ModelWeights, NodeShape};
use crate::layers::LayerKind;
use crate::rng::{derive_seed, tag, Rng};
use crate::ranking::RankVector;
use crate::tensor::{alloc, Tensor};

// ---------------------------------------------------------------------------
// Ranking stability
// ---------------------------------------------------------------------------

/// A ranking procedure driven by (graph, weights, batch, batch_seed).
pub type Ranker<'a> =
    dyn Fn(&ModelGraph, &ModelWeights, &Tensor, u64) -> Result<RankVector> + Sync + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub layer_index: usize,
    pub layer_id: String,
    pub filters: usize,
    pub selected: usize,
    /// |union of top-k selections over R batches| / (R * k).
    pub top_fraction: f64,
    /// Same for the bottom-k selections.
    pub least_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub rows: Vec<StabilityRow>,
    pub repetitions: usize,
    pub quantile: f64,
    pub seeds: Vec<u64>,
    pub warnings: Vec<String>,
}

/// Top-k filter indices by score, ties resolved toward lower indices.
pub fn top_k_indices(scores: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Bottom-k filter indices by score, ties resolved toward lower indices.
pub fn bottom_k_indices(scores: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// |union| / (R * k): 1/R when every repetition picks the same set, 1.0 when
/// the selections are fully disjoint.
pub fn union_fraction(selections: &[Vec<usize>]) -> f64 {
    let k: usize = selections.iter().map(Vec::len).sum();
    if k == 0 {
        return 0.0;
    }
    let mut union: Vec<usize> = selections.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();
    union.len() as f64 / k as f64
}

/// Re-rank over `repetitions` independent calibration batches and measure
/// how much the top and bottom quantile selections move. Repetitions may
/// run in parallel (`jobs` threads); results are assembled in seed order.
pub fn stability_fraction(
    graph: &ModelGraph,
    weights: &ModelWeights,
    ranker: &Ranker,
    dataset: &Dataset,
    batch_size: usize,
    repetitions: usize,
    quantile: f64,
    seed: u64,
    jobs: usize,
) -> Result<StabilityReport> {
    if repetitions < 2 {
        return Err(Error::InvalidArgument("stability needs R >= 2".into()));
    }
    if !(0.0 < quantile && quantile < 0.5) {
        return Err(Error::InvalidArgument(
            "stability quantile must be in (0, 0.5)".into(),
        ));
    }
    let seeds: Vec<u64> = (0..repetitions)
        .map(|r| derive_seed(seed, tag("stability-batch") ^ r as u64))
        .collect();
    let ranks = crate::parallel::parallel_map(repetitions, jobs, |i| {
        let s = seeds[i];
        let (batch, _) = sample_batch(dataset, batch_size.min(dataset.len()), s)?;
        ranker(graph, weights, &batch, s)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let layer_count = ranks[0].layers.len();
    for li in 0..layer_count {
        let filters = ranks[0].layers[li].scores.len();
        let k = (quantile * filters as f64).floor() as usize;
        let layer_id = ranks[0].layers[li].layer_id.clone();
        if k == 0 {
            warnings.push(format!(
                "layer {layer_id}: quantile selects 0 of {filters} filters, skipped"
            ));
            continue;
        }
        let tops: Vec<Vec<usize>> = ranks
            .iter()
            .map(|r| top_k_indices(&r.layers[li].scores, k))
            .collect();
        let bottoms: Vec<Vec<usize>> = ranks
            .iter()
            .map(|r| bottom_k_indices(&r.layers[li].scores, k))
            .collect();
        rows.push(StabilityRow {
            layer_index: li,
            layer_id,
            filters,
            selected: k,
            top_fraction: union_fraction(&tops),
            least_fraction: union_fraction(&bottoms),
        });
    }
    Ok(StabilityReport {
        rows,
        repetitions,
        quantile,
        seeds,
        warnings,
    })
}

impl StabilityReport {
    pub fn mean_top_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.top_fraction).sum::<f64>() / self.rows.len() as f64
    }

    /// CSV with raw fractions and 5-layer centered moving averages.
    pub fn to_csv(&self) -> String {
        let smooth = |values: &[f64]| -> Vec<f64> {
            let n = values.len();
            (0..n)
                .map(|i| {
                    let lo = i.saturating_sub(2);
                    let hi = (i + 2).min(n - 1);
                    values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
                })
                .collect()
        };
        let tops: Vec<f64> = self.rows.iter().map(|r| r.top_fraction).collect();
        let leasts: Vec<f64> = self.rows.iter().map(|r| r.least_fraction).collect();
        let tops_s = smooth(&tops);
        let leasts_s = smooth(&leasts);
        let mut out =
            String::from("layer_index,top_fraction,least_fraction,top_smoothed,least_smoothed\n");
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                row.layer_index, row.top_fraction, row.least_fraction, tops_s[i], leasts_s[i]
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Grad-CAM
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GradCamMap {
    /// H x W heatmap in [0,1], max exactly 1 unless identically zero.
    pub heatmap: Tensor,
    pub target_class: usize,
    pub probability: f32,
}

/// Index of the node the heatmap reads: the deepest activation that still
/// has spatial extent (the feature map just before classifier pooling).
pub fn gradcam_target_node(graph: &ModelGraph) -> Result<usize> {
    let shapes = graph.infer_shapes()?;
    let mut best: Option<usize> = None;
    for (i, node) in graph.nodes().iter().enumerate() {
        let spatial = matches!(shapes[i], NodeShape::Spatial { .. });
        if spatial
            && matches!(
                node.kind,
                LayerKind::ReLU | LayerKind::Conv2d { .. } | LayerKind::BatchNorm { .. }
            )
        {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("model has no conv feature maps".into()))
}

/// Gradient-weighted class activation map for one image.
pub fn gradcam(
    graph: &ModelGraph,
    weights: &ModelWeights,
    image: &Tensor,
    target_class: usize,
) -> Result<GradCamMap> {
    if target_class >= graph.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "target class {target_class} out of range for {} classes",
            graph.num_classes()
        )));
    }
    let (c, h, w) = graph.input_shape();
    let batch_image = if image.shape() == [c, h, w] {
        image.reshaped(&[1, c, h, w])?
    } else if image.shape() == [1, c, h, w] {
        image.clone()
    } else {
        return Err(Error::ShapeMismatch {
            context: "gradcam image",
            expected: format!("[{c}, {h}, {w}]"),
            got: format!("{:?}", image.shape()),
        });
    };
    let target_node = gradcam_target_node(graph)?;
    let acts = forward_cached(graph, weights, &batch_image, Mode::Infer)?;
    let logits = acts.logits();
    let probs = crate::layers::softmax(logits)?;
    let probability = probs.at2(0, target_class);

    // Seed: d(logit_target)/d(logits) = one-hot.
    let mut seed = Tensor::zeros(logits.shape());
    *seed.at2_mut(0, target_class) = 1.0;
    let grads = backprop(graph, weights, &acts, &seed)?;
    let Some(grad) = &grads.node_grads[target_node] else {
        return Err(Error::InvalidArgument(
            "target feature map does not influence the logit".into(),
        ));
    };
    let fmap = &acts.outputs[target_node];
    let shape = fmap.shape();
    let (channels, fh, fw) = (shape[1], shape[2], shape[3]);

    // Channel weights: spatial mean of the gradient.
    let inv_hw = 1.0f32 / (fh * fw) as f32;
    let mut cam = vec![0.0f32; fh * fw];
    for k in 0..channels {
        let mut wk = 0.0f32;
        for y in 0..fh {
            for x in 0..fw {
                wk += grad.at4(0, k, y, x);
            }
        }
        wk *= inv_hw;
        for y in 0..fh {
            for x in 0..fw {
                cam[y * fw + x] += wk * fmap.at4(0, k, y, x);
            }
        }
    }
    for v in cam.iter_mut() {
        *v = v.max(0.0);
    }
    let upsampled = bilinear_upsample(&cam, fh, fw, h, w);
    let max = upsampled.iter().cloned().fold(0.0f32, f32::max);
    let mut heatmap = Tensor::from_vec(vec![h, w], upsampled)?;
    if max > 0.0 {
        for v in heatmap.data_mut() {
            *v /= max;
        }
    }
    Ok(GradCamMap {
        heatmap,
        target_class,
        probability,
    })
}

/// Bilinear resize with half-pixel centers.
fn bilinear_upsample(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dh * dw];
    let scale_y = sh as f32 / dh as f32;
    let scale_x = sw as f32 / dw as f32;
    for y in 0..dh {
        let fy = ((y as f32 + 0.5) * scale_y - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f32;
        for x in 0..dw {
            let fx = ((x as f32 + 0.5) * scale_x - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f32;
            let a = src[y0 * sw + x0];
            let b = src[y0 * sw + x1];
            let c = src[y1 * sw + x0];
            let d = src[y1 * sw + x1];
            out[y * dw + x] =
                a * (1.0 - ty) * (1.0 - tx) + b * (1.0 - ty) * tx + c * ty * (1.0 - tx) + d * ty * tx;
        }
    }
    out
}

impl GradCamMap {
    /// 8-bit ASCII PGM (P2).
    pub fn to_pgm(&self) -> String {
        let (h, w) = (self.heatmap.shape()[0], self.heatmap.shape()[1]);
        let mut out = format!("P2\n{w} {h}\n255\n");
        for y in 0..h {
            let row: Vec<String> = (0..w)
                .map(|x| {
                    let v = (self.heatmap.at2(y, x) * 255.0).round().clamp(0.0, 255.0);
                    format!("{}", v as u32)
                })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let (h, w) = (self.heatmap.shape()[0], self.heatmap.shape()[1]);
        let mut out = String::new();
        for y in 0..h {
            let row: Vec<String> = (0..w).map(|x| format!("{}", self.heatmap.at2(y, x))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Inference benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub model: String,
    pub time_mean_ms: f64,
    pub time_std_ms: f64,
    /// Peak transient tensor allocation during one inference, bytes.
    /// Identical across repetitions by construction; reported once.
    pub peak_bytes: i64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Per-model time and memory rows with reductions against the first
    /// (baseline) row. `dataset` is a label column only. The memory std is
    /// zero by construction: the peak is identical across repetitions.
    pub fn to_csv(&self, dataset: &str) -> String {
        let mut out = String::from(
            "model,dataset,time_mean_ms,time_std_ms,mem_mean_mb,mem_std_mb,time_reduction_pct,mem_reduction_pct\n",
        );
        let baseline = self.rows.first();
        for row in &self.rows {
            let mem_mb = row.peak_bytes as f64 / (1024.0 * 1024.0);
            let (tr, mr) = match baseline {
                Some(b) if b.time_mean_ms > 0.0 && b.peak_bytes > 0 => (
                    100.0 * (1.0 - row.time_mean_ms / b.time_mean_ms),
                    100.0 * (1.0 - row.peak_bytes as f64 / b.peak_bytes as f64),
                ),
                _ => (0.0, 0.0),
            };
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.6},{:.6},{:.2},{:.2}\n",
                row.model, dataset, row.time_mean_ms, row.time_std_ms, mem_mb, 0.0, tr, mr
            ));
        }
        out
    }
}

/// Time `repetitions` single-image inferences after `warmup` untimed runs.
/// `clock_ns` supplies monotonic nanosecond readings so tests can inject a
/// synthetic clock; production use passes [`instant_clock`].
pub fn bench_model_with_clock(
    name: &str,
    graph: &ModelGraph,
    weights: &ModelWeights,
    repetitions: usize,
    warmup: usize,
    seed: u64,
    clock_ns: &mut dyn FnMut() -> u64,
) -> Result<BenchRow> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument("bench needs R >= 1".into()));
    }
    let (c, h, w) = graph.input_shape();
    let mut rng = Rng::new(seed);
    let mut image = Tensor::zeros(&[1, c, h, w]);
    for v in image.data_mut() {
        *v = rng.next_f32();
    }
    for _ in 0..warmup {
        forward_logits(graph, weights, &image)?;
    }
    let mut times_ms = Vec::with_capacity(repetitions);
    let mut peak = None;
    for _ in 0..repetitions {
        let live_before = alloc::live_bytes();
        alloc::reset_peak();
        let t0 = clock_ns();
        forward_logits(graph, weights, &image)?;
        let t1 = clock_ns();
        let transient = alloc::peak_bytes() - live_before;
        match peak {
            None => peak = Some(transient),
            Some(p) => debug_assert_eq!(p, transient, "allocation high-water must be stable"),
        }
        times_ms.push((t1.saturating_sub(t0)) as f64 / 1e6);
    }
    let (mean, std) = crate::trainer::mean_and_population_std(&times_ms);
    Ok(BenchRow {
        model: name.to_string(),
        time_mean_ms: mean,
        time_std_ms: std,
        peak_bytes: peak.unwrap_or(0),
    })
}

/// Monotonic clock in nanoseconds for production benchmarking.
pub fn instant_clock() -> impl FnMut() -> u64 {
    let origin = Instant::now();
    move || origin.elapsed().as_nanos() as u64
}

pub fn bench_model(
    name: &str,
    graph: &ModelGraph,
    weights: &ModelWeights,
    repetitions: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchRow> {
    let mut clock = instant_clock();
    bench_model_with_clock(name, graph, weights, repetitions, warmup, seed, &mut clock)
}
