//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS line with its elapsed time. Run with `--nocapture` to see them.
//! (Criterion 8, end-to-end CLI determinism, lives in the cli crate's
//! acceptance target.)

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use betarank_core::analysis::{bench_model, stability_fraction, Ranker};
use betarank_core::arch::build_architecture;
use betarank_core::dataio::SyntheticSpec;
use betarank_core::engine;
use betarank_core::flops::count_flops_params;
use betarank_core::graph::{init_weights, ModelGraph, Node, INPUT_ID};
use betarank_core::layers::{ConvParams, LayerKind};
use betarank_core::pruning::{construct_pruned, select_top_filters, ProtectedPolicy, RateMap};
use betarank_core::ranking::{self, RankMethod};
use betarank_core::rng::Rng;
use betarank_core::tensor::Tensor;
use betarank_core::trainer::{self, train, ExperimentConfig, TrainConfig};

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn pass(criterion: u32, name: &str, t0: Instant) {
    println!(
        "ACCEPTANCE {criterion} {name}: PASS ({:.2}s)",
        t0.elapsed().as_secs_f64()
    );
}

fn within_pct(value: f64, target: f64, pct: f64) -> bool {
    (value - target).abs() / target <= pct / 100.0
}

#[test]
fn criterion_01_flop_param_reproduction() {
    let t0 = Instant::now();
    let cases: [(&str, (usize, usize, usize), Option<f64>, Option<f64>, f64); 5] = [
        // family, input, flops_m, params_m, tolerance pct
        ("resnet56", (3, 32, 32), Some(125.49), Some(0.85), 1.0),
        ("vgg16-cifar", (3, 32, 32), Some(313.73), Some(14.98), 1.0),
        ("resnet110", (3, 32, 32), None, Some(1.73), 1.0),
        ("resnet56", (3, 256, 256), Some(8167.62), None, 5.0),
        ("resnet110", (3, 256, 256), Some(16453.47), None, 5.0),
    ];
    for (family, input, flops_m, params_m, tol) in cases {
        let classes = if input.1 == 256 { 3 } else { 10 };
        let graph = build_architecture(family, input, classes).unwrap();
        let report = count_flops_params(&graph).unwrap();
        if let Some(want) = flops_m {
            let got = report.total_flops as f64 / 1e6;
            assert!(
                within_pct(got, want, tol),
                "{family}@{input:?}: flops {got:.2}M vs {want}M"
            );
        }
        if let Some(want) = params_m {
            let got = report.total_params as f64 / 1e6;
            assert!(
                within_pct(got, want, tol),
                "{family}@{input:?}: params {got:.2}M vs {want}M"
            );
        }
    }
    pass(1, "flop/param reproduction", t0);
}

#[test]
fn criterion_02_pruned_reduction_reproduction() {
    let t0 = Instant::now();
    let graph = build_architecture("vgg16-cifar", (3, 32, 32), 10).unwrap();
    let weights = init_weights(&graph, 0).unwrap();
    let rank = ranking::l1_rank(&graph, &weights, 0).unwrap();
    let rates_text =
        std::fs::read_to_string(configs_dir().join("vgg16_cifar10_pr.txt")).unwrap();
    let rates = RateMap::from_text(&rates_text, "vgg16_cifar10_pr.txt")
        .unwrap()
        .resolve(&graph)
        .unwrap();
    let plan = select_top_filters(&graph, &rank, &rates).unwrap();
    let outcome = construct_pruned(&graph, &weights, &plan, ProtectedPolicy::Error).unwrap();
    let r = outcome.report.reduction.unwrap();
    assert!(
        (r.params_pct - 81.0).abs() <= 2.0,
        "param reduction {:.2}%",
        r.params_pct
    );
    assert!(
        (r.flops_pct - 58.0).abs() <= 2.0,
        "flop reduction {:.2}%",
        r.flops_pct
    );
    pass(2, "pruned-model reduction reproduction", t0);
}

#[test]
fn criterion_03_ranking_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = Rng::new(0xBE7A);
    let batch_sizes = [2usize, 4, 8];
    for trial in 0..100 {
        let model = common::random_conv_stack(&mut rng);
        let n = batch_sizes[trial % batch_sizes.len()];
        let (c, h, w) = model.graph.input_shape();
        let batch = common::random_batch(&mut rng, (c, h, w), n);

        let beta = ranking::beta_rank(&model.graph, &model.weights, &batch, 0).unwrap();
        let oracle = common::beta_oracle(&model.graph, &model.weights, &batch);
        assert_eq!(beta.layers.len(), oracle.len());
        for (got, want) in beta.layers.iter().zip(&oracle) {
            for (k, &s) in got.scores.iter().enumerate() {
                common::assert_close(
                    f64::from(s),
                    want.beta_scores[k],
                    1e-5,
                    &format!("trial {trial} layer {} filter {k}", got.layer_id),
                );
            }
        }

        let hrank = ranking::hrank_score(&model.graph, &model.weights, &batch, 0).unwrap();
        let h_oracle = common::hrank_oracle(&model.graph, &model.weights, &batch);
        for (got, (oid, oscores)) in hrank.layers.iter().zip(&h_oracle) {
            assert_eq!(&got.layer_id, oid);
            for (k, &s) in got.scores.iter().enumerate() {
                assert_eq!(
                    s, oscores[k] as f32,
                    "trial {trial}: rank mismatch at {oid} filter {k}"
                );
            }
        }
    }
    pass(3, "ranking oracle equivalence (100 random models)", t0);
}

#[test]
fn criterion_04_surgery_mask_equivalence() {
    let t0 = Instant::now();
    let mut rng = Rng::new(0x5EED);
    for trial in 0..50 {
        let model = if trial % 2 == 0 {
            common::random_vgg_toy(&mut rng)
        } else {
            common::random_resnet_toy(&mut rng)
        };
        let plan = common::random_plan(&model.graph, &mut rng);
        let outcome =
            construct_pruned(&model.graph, &model.weights, &plan, ProtectedPolicy::Error)
                .unwrap();
        let masked = common::mask_oracle_weights(&model.graph, &model.weights, &plan);
        let batch = common::random_batch(&mut rng, model.graph.input_shape(), 2);
        let masked_logits = engine::forward_logits(&model.graph, &masked, &batch).unwrap();
        let pruned_logits =
            engine::forward_logits(&outcome.graph, &outcome.weights, &batch).unwrap();
        let diff = common::max_rel_diff(&masked_logits, &pruned_logits);
        assert!(diff < 1e-5, "trial {trial}: max rel diff {diff:.3e}");
    }
    pass(4, "surgery/mask equivalence (50 random plans)", t0);
}

/// A graph exercising conv (bias, stride 2, padding), batch norm, ReLU,
/// max pool, avg pool, channel pad, residual add, global pooling, dense.
fn coverage_graph_residual() -> ModelGraph {
    let conv = |id: &str, input: &str, in_c, out_c, stride, bias| Node {
        id: id.into(),
        kind: LayerKind::Conv2d {
            params: ConvParams {
                kernel_h: 3,
                kernel_w: 3,
                stride,
                padding: 1,
                in_channels: in_c,
                out_channels: out_c,
            },
            bias,
        },
        inputs: vec![input.into()],
    };
    ModelGraph::new(
        vec![
            conv("conv1", INPUT_ID, 2, 4, 1, true),
            Node {
                id: "bn1".into(),
                kind: LayerKind::BatchNorm { channels: 4 },
                inputs: vec!["conv1".into()],
            },
            Node {
                id: "relu1".into(),
                kind: LayerKind::ReLU,
                inputs: vec!["bn1".into()],
            },
            conv("conv2", "relu1", 4, 6, 2, false),
            Node {
                id: "bn2".into(),
                kind: LayerKind::BatchNorm { channels: 6 },
                inputs: vec!["conv2".into()],
            },
            Node {
                id: "short.pool".into(),
                kind: LayerKind::AvgPool { kernel: 1, stride: 2 },
                inputs: vec!["relu1".into()],
            },
            Node {
                id: "short.pad".into(),
                kind: LayerKind::ChannelPad {
                    out_channels: 6,
                    positions: vec![1, 2, 3, 4],
                },
                inputs: vec!["short.pool".into()],
            },
            Node {
                id: "add".into(),
                kind: LayerKind::Add,
                inputs: vec!["bn2".into(), "short.pad".into()],
            },
            Node {
                id: "relu2".into(),
                kind: LayerKind::ReLU,
                inputs: vec!["add".into()],
            },
            Node {
                id: "maxpool".into(),
                kind: LayerKind::MaxPool { kernel: 2, stride: 2 },
                inputs: vec!["relu2".into()],
            },
            Node {
                id: "gap".into(),
                kind: LayerKind::GlobalAvgPool,
                inputs: vec!["maxpool".into()],
            },
            Node {
                id: "fc".into(),
                kind: LayerKind::Dense {
                    in_features: 6,
                    out_features: 3,
                },
                inputs: vec!["gap".into()],
            },
        ],
        (2, 8, 8),
        3,
    )
    .unwrap()
}

/// Flatten and softmax coverage.
fn coverage_graph_flat() -> ModelGraph {
    ModelGraph::new(
        vec![
            Node {
                id: "conv".into(),
                kind: LayerKind::Conv2d {
                    params: ConvParams {
                        kernel_h: 3,
                        kernel_w: 3,
                        stride: 1,
                        padding: 0,
                        in_channels: 1,
                        out_channels: 3,
                    },
                    bias: true,
                },
                inputs: vec![INPUT_ID.into()],
            },
            Node {
                id: "relu".into(),
                kind: LayerKind::ReLU,
                inputs: vec!["conv".into()],
            },
            Node {
                id: "flat".into(),
                kind: LayerKind::Flatten,
                inputs: vec!["relu".into()],
            },
            Node {
                id: "fc".into(),
                kind: LayerKind::Dense {
                    in_features: 48,
                    out_features: 4,
                },
                inputs: vec!["flat".into()],
            },
            Node {
                id: "softmax".into(),
                kind: LayerKind::Softmax,
                inputs: vec!["fc".into()],
            },
        ],
        (1, 6, 6),
        4,
    )
    .unwrap()
}

#[test]
fn criterion_05_gradient_correctness() {
    let t0 = Instant::now();
    let mut rng = Rng::new(0x60AD);
    for (name, graph) in [
        ("residual coverage", coverage_graph_residual()),
        ("flat coverage", coverage_graph_flat()),
    ] {
        let weights = common::randomize_weights(&graph, &mut rng).convert::<f64>();
        let (c, h, w) = graph.input_shape();
        let mut input = Tensor::<f64>::zeros(&[2, c, h, w]);
        for v in input.data_mut() {
            *v = f64::from(rng.normal_f32()) * 0.5;
        }
        let acts =
            engine::forward_cached(&graph, &weights, &input, engine::Mode::Train).unwrap();
        let mut seed = Tensor::<f64>::zeros(acts.logits().shape());
        for v in seed.data_mut() {
            *v = f64::from(rng.normal_f32());
        }
        let max_rel = common::gradcheck_max_rel_error(&graph, &weights, &input, &seed);
        assert!(max_rel < 1e-4, "{name}: max relative error {max_rel:.3e}");
    }
    pass(5, "gradient correctness (every layer type)", t0);
}

#[test]
fn criterion_06_stability_metric() {
    let t0 = Instant::now();
    // Train a toy CNN briefly on the synthetic dataset, then measure.
    let (train_ds, _) =
        betarank_core::dataio::generate_synthetic(&SyntheticSpec::imbalanced3(6)).unwrap();
    let graph = build_architecture("toycnn", (3, 32, 32), 3).unwrap();
    let init = init_weights(&graph, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 32,
        lr: 0.05,
        seed: 2,
        ..TrainConfig::default()
    };
    let trained = train(&graph, &init, &train_ds, &cfg).unwrap();

    let beta_ranker: Box<Ranker> =
        Box::new(|g, w, b, s| betarank_core::ranking::beta_rank(g, w, b, s));
    let hrank_ranker: Box<Ranker> =
        Box::new(|g, w, b, s| betarank_core::ranking::hrank_score(g, w, b, s));
    let out_dir = std::env::temp_dir().join(format!("betarank-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&out_dir).unwrap();
    let mut means = BTreeMap::new();
    for (name, ranker) in [("beta", &beta_ranker), ("hrank", &hrank_ranker)] {
        let report = stability_fraction(
            &graph,
            &trained.weights,
            ranker.as_ref(),
            &train_ds,
            64,
            3,
            0.25,
            11,
            1,
        )
        .unwrap();
        for row in &report.rows {
            assert!(
                row.top_fraction >= 1.0 / 3.0 - 1e-12 && row.top_fraction <= 1.0 + 1e-12,
                "{name} {}: top fraction {} out of band",
                row.layer_id,
                row.top_fraction
            );
            assert!(
                row.least_fraction >= 1.0 / 3.0 - 1e-12 && row.least_fraction <= 1.0 + 1e-12
            );
        }
        let csv_path = out_dir.join(format!("stability_{name}.csv"));
        std::fs::write(&csv_path, report.to_csv()).unwrap();
        means.insert(name, report.mean_top_fraction());
    }
    println!(
        "stability mean top fractions: beta {:.4}, hrank {:.4} (CSVs in {})",
        means["beta"],
        means["hrank"],
        out_dir.display()
    );

    // Deterministic constant scores select identical sets every repetition.
    let constant: Box<Ranker> = Box::new(|g, _w, _b, s| {
        Ok(betarank_core::ranking::RankVector {
            method: RankMethod::L1,
            layers: g
                .conv_node_ids()
                .into_iter()
                .map(|id| {
                    let count = match g.node(&id).map(|n| &n.kind) {
                        Some(LayerKind::Conv2d { params, .. }) => params.out_channels,
                        _ => 0,
                    };
                    betarank_core::ranking::LayerRanks {
                        layer_id: id,
                        scores: vec![1.0; count],
                    }
                })
                .collect(),
            batch_seed: s,
        })
    });
    let const_report = stability_fraction(
        &graph,
        &trained.weights,
        constant.as_ref(),
        &train_ds,
        64,
        3,
        0.25,
        11,
        1,
    )
    .unwrap();
    for row in &const_report.rows {
        assert_eq!(row.top_fraction, 1.0 / 3.0);
        assert_eq!(row.least_fraction, 1.0 / 3.0);
    }
    pass(6, "stability metric bounds and determinism", t0);
}

#[test]
fn criterion_07_imbalance_advantage() {
    let t0 = Instant::now();
    let config =
        ExperimentConfig::from_config_file(&configs_dir().join("experiment_idrid.txt")).unwrap();
    assert_eq!(config.repetitions, 5);
    let report = trainer::run_experiment(&config).unwrap();
    let recall_of = |method: &str| -> &trainer::MetricAggregate {
        report
            .row(method)
            .unwrap()
            .metrics
            .iter()
            .find(|m| m.metric == "macro_recall")
            .unwrap()
    };
    let beta = recall_of("beta");
    let l1 = recall_of("l1");
    if beta.mean < l1.mean {
        // Full seed-wise table for inspection before failing.
        eprintln!("seed-wise macro recall (beta vs l1):");
        for (i, (b, l)) in beta.per_rep.iter().zip(&l1.per_rep).enumerate() {
            eprintln!("  rep {i}: beta {b:.4}  l1 {l:.4}");
        }
        eprintln!("{}", report.to_csv());
    }
    assert!(
        beta.mean >= l1.mean,
        "mean macro recall: beta {:.4} < l1 {:.4}",
        beta.mean,
        l1.mean
    );
    println!(
        "macro recall over 5 seeds: beta {:.2} +- {:.2} vs l1 {:.2} +- {:.2}",
        beta.mean, beta.std, l1.mean, l1.std
    );
    pass(7, "imbalance advantage (directional)", t0);
}

#[test]
fn criterion_09_benchmark_directionality() {
    let t0 = Instant::now();
    let graph = build_architecture("vgg16-cifar", (3, 32, 32), 10).unwrap();
    let weights = init_weights(&graph, 3).unwrap();
    let rank = ranking::l1_rank(&graph, &weights, 0).unwrap();
    let rates_text =
        std::fs::read_to_string(configs_dir().join("vgg16_cifar10_pr.txt")).unwrap();
    let rates = RateMap::from_text(&rates_text, "vgg16_cifar10_pr.txt")
        .unwrap()
        .resolve(&graph)
        .unwrap();
    let plan = select_top_filters(&graph, &rank, &rates).unwrap();
    let outcome = construct_pruned(&graph, &weights, &plan, ProtectedPolicy::Error).unwrap();

    let base = bench_model("baseline", &graph, &weights, 5, 1, 9).unwrap();
    let pruned = bench_model("pruned", &outcome.graph, &outcome.weights, 5, 1, 9).unwrap();
    let time_reduction = 100.0 * (1.0 - pruned.time_mean_ms / base.time_mean_ms);
    println!(
        "baseline {:.2} ms / {:.0} KiB transient, pruned {:.2} ms / {:.0} KiB transient, time reduction {:.1}%",
        base.time_mean_ms,
        base.peak_bytes as f64 / 1024.0,
        pruned.time_mean_ms,
        pruned.peak_bytes as f64 / 1024.0,
        time_reduction
    );
    assert!(
        time_reduction >= 30.0,
        "time reduction {time_reduction:.1}% below 30%"
    );
    assert!(
        pruned.peak_bytes < base.peak_bytes,
        "peak allocation must strictly decrease: {} vs {}",
        pruned.peak_bytes,
        base.peak_bytes
    );
    pass(9, "benchmark directionality", t0);
}

#[test]
fn criterion_10_metric_correctness() {
    let t0 = Instant::now();
    let mut rng = Rng::new(0xCAFE);
    for _ in 0..1000 {
        let k = 2 + rng.below(5);
        let n = 1 + rng.below(40);
        let mut confusion = vec![vec![0usize; k]; k];
        let mut labels = Vec::new();
        let mut preds = Vec::new();
        for _ in 0..n {
            let t = rng.below(k);
            let p = rng.below(k);
            confusion[t][p] += 1;
            labels.push(t);
            preds.push(p);
        }
        let (acc, mp, mr, ms) = trainer::metrics_from_confusion(&confusion);
        // Independent recomputation from the raw pairs.
        let correct = labels.iter().zip(&preds).filter(|(a, b)| a == b).count();
        assert!((acc - 100.0 * correct as f64 / n as f64).abs() < 1e-9);
        let mut mp_o = 0.0;
        let mut mr_o = 0.0;
        let mut ms_o = 0.0;
        for c in 0..k {
            let tp = labels.iter().zip(&preds).filter(|&(&t, &p)| t == c && p == c).count();
            let fp = labels.iter().zip(&preds).filter(|&(&t, &p)| t != c && p == c).count();
            let fn_ = labels.iter().zip(&preds).filter(|&(&t, &p)| t == c && p != c).count();
            let tn = n - tp - fp - fn_;
            mp_o += if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            mr_o += if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            ms_o += if tn + fp == 0 { 0.0 } else { tn as f64 / (tn + fp) as f64 };
        }
        assert!((mp - 100.0 * mp_o / k as f64).abs() < 1e-9);
        assert!((mr - 100.0 * mr_o / k as f64).abs() < 1e-9);
        assert!((ms - 100.0 * ms_o / k as f64).abs() < 1e-9);
    }
    // All-majority prediction on the published validation counts.
    let confusion = vec![vec![0, 0, 45], vec![0, 0, 10], vec![0, 0, 48]];
    let (acc, _, _, _) = trainer::metrics_from_confusion(&confusion);
    assert!((acc - 46.60).abs() <= 0.01, "accuracy {acc:.4}");
    pass(10, "metric correctness", t0);
}
