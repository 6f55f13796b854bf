//! FLOP and parameter accounting.
//!
//! Convention: one multiply-accumulate counts as one FLOP; convolutions and
//! dense layers are the only contributors. Batch norm, activations, pooling,
//! and element-wise sums count as zero. Parameter counts cover trainable
//! tensors only (conv weights and biases, batch-norm scale and shift, dense
//! weights and biases), not running statistics.

use crate::error::Result;
use crate::graph::{ModelGraph, ModelWeights, NodeShape};
use crate::layers::LayerKind;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopRow {
    pub node_id: String,
    pub kind: &'static str,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    pub rows: Vec<FlopRow>,
    pub total_flops: u64,
    pub total_params: u64,
    /// Percent reductions versus a baseline, when one was supplied.
    pub reduction: Option<Reduction>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reduction {
    pub baseline_flops: u64,
    pub baseline_params: u64,
    pub flops_pct: f64,
    pub params_pct: f64,
}

pub fn count_flops_params(graph: &ModelGraph) -> Result<FlopReport> {
    let shapes = graph.infer_shapes()?;
    let mut rows = Vec::with_capacity(graph.nodes().len());
    for (node, shape) in graph.nodes().iter().zip(&shapes) {
        let (flops, params) = match &node.kind {
            LayerKind::Conv2d { params: cp, bias } => {
                let NodeShape::Spatial { h, w, .. } = shape else {
                    unreachable!("conv output is spatial")
                };
                let macs = (cp.kernel_h * cp.kernel_w * cp.in_channels * cp.out_channels * h * w)
                    as u64;
                let mut p = (cp.out_channels * cp.in_channels * cp.kernel_h * cp.kernel_w) as u64;
                if *bias {
                    p += cp.out_channels as u64;
                }
                (macs, p)
            }
            LayerKind::BatchNorm { channels } => (0, 2 * *channels as u64),
            LayerKind::Dense {
                in_features,
                out_features,
            } => (
                (*in_features * *out_features) as u64,
                (*in_features * *out_features + *out_features) as u64,
            ),
            _ => (0, 0),
        };
        rows.push(FlopRow {
            node_id: node.id.clone(),
            kind: node.kind.name(),
            flops,
            params,
        });
    }
    let total_flops = rows.iter().map(|r| r.flops).sum();
    let total_params = rows.iter().map(|r| r.params).sum();
    Ok(FlopReport {
        rows,
        total_flops,
        total_params,
        reduction: None,
    })
}

impl FlopReport {
    /// Attach reduction percentages: 100 * (1 - pruned / baseline).
    pub fn with_baseline(mut self, baseline: &FlopReport) -> Self {
        let pct = |pruned: u64, base: u64| -> f64 {
            if base == 0 {
                0.0
            } else {
                100.0 * (1.0 - pruned as f64 / base as f64)
            }
        };
        self.reduction = Some(Reduction {
            baseline_flops: baseline.total_flops,
            baseline_params: baseline.total_params,
            flops_pct: pct(self.total_flops, baseline.total_flops),
            params_pct: pct(self.total_params, baseline.total_params),
        });
        self
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("node_id,type,flops,params\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.node_id, row.kind, row.flops, row.params
            ));
        }
        out.push_str(&format!(
            "TOTAL,all,{},{}\n",
            self.total_flops, self.total_params
        ));
        if let Some(r) = &self.reduction {
            out.push_str(&format!(
                "REDUCTION,vs_baseline,{:.4},{:.4}\n",
                r.flops_pct, r.params_pct
            ));
        }
        out
    }

    /// Cross-check: the params column must equal the element count of the
    /// trainable tensors actually stored for the model.
    pub fn matches_weights<S: Scalar>(&self, weights: &ModelWeights<S>) -> bool {
        self.total_params == weights.trainable_elements() as u64
    }
}
