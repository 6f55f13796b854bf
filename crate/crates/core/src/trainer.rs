//! Baseline training, post-pruning fine-tuning, evaluation, and the
//! repeated rank/prune/fine-tune experiment loop.

use std::collections::BTreeMap;

use crate::dataio::{gather, generate_synthetic, load_cifar10, sample_batch, Dataset, SyntheticSpec};
use crate::engine::{
    forward_cached, forward_logits, loss_and_grads, sgd_step, update_running_stats, Mode,
    MomentumState,
};
use crate::error::{Error, Result};
use crate::flops::count_flops_params;
use crate::graph::{ModelGraph, ModelWeights};
use crate::pruning::{construct_pruned, select_top_filters, ProtectedPolicy, RateMap};
use crate::ranking::{beta_rank, hrank_score, l1_rank, RankMethod, RankVector};
use crate::rng::{derive_seed, tag, Rng};
use crate::tensor::Tensor;

const BN_RUNNING_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch fractions at which the learning rate is multiplied by
    /// `lr_factor`.
    pub lr_milestones: Vec<f64>,
    pub lr_factor: f64,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: vec![0.5, 0.75],
            lr_factor: 0.1,
            seed: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for &frac in &self.lr_milestones {
            let milestone = (frac * self.epochs as f64).floor() as usize;
            if epoch >= milestone && milestone > 0 {
                lr *= self.lr_factor;
            }
        }
        lr
    }
}

pub struct TrainResult {
    pub weights: ModelWeights,
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Horizontal flip (p = 0.5) and 4-pixel random crop, applied per sample.
fn augment_batch(batch: &mut Tensor, rng: &mut Rng) {
    let shape = batch.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    const PAD: usize = 4;
    for s in 0..n {
        let flip = rng.below(2) == 1;
        let dy = rng.below(2 * PAD + 1) as isize - PAD as isize;
        let dx = rng.below(2 * PAD + 1) as isize - PAD as isize;
        let mut sample = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx = x as isize + dx;
                    let v = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        0.0
                    } else {
                        let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                        batch.at4(s, ch, sy as usize, sx)
                    };
                    sample[(ch * h + y) * w + x] = v;
                }
            }
        }
        let base = s * c * h * w;
        batch.data_mut()[base..base + sample.len()].copy_from_slice(&sample);
    }
}

/// Momentum-SGD training with softmax cross-entropy. Deterministic per
/// config seed; batch statistics feed the running averages after every step.
pub fn train(
    graph: &ModelGraph,
    weights: &ModelWeights,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainResult> {
    if config.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be >= 1".into()));
    }
    if dataset.num_classes != graph.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, graph expects {}",
            dataset.num_classes,
            graph.num_classes()
        )));
    }
    let mut weights = weights.clone();
    let mut momentum = MomentumState::new();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let n = dataset.len();
    let batch = config.batch_size.min(n).max(1);
    for epoch in 0..config.epochs {
        let lr = config.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = Rng::new(derive_seed(config.seed, tag("epoch") ^ epoch as u64));
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut steps = 0usize;
        for chunk in order.chunks(batch) {
            let (mut images, labels) = gather(dataset, chunk);
            if config.augment {
                augment_batch(&mut images, &mut rng);
            }
            let acts = forward_cached(graph, &weights, &images, Mode::Train)?;
            let (loss, grads) = loss_and_grads(graph, &weights, &acts, &labels).map_err(|e| {
                match e {
                    Error::DivergedLoss { node, .. } => Error::DivergedLoss { epoch, node },
                    other => other,
                }
            })?;
            sgd_step(
                &mut weights,
                &grads,
                &mut momentum,
                lr,
                config.momentum,
                config.weight_decay,
            )?;
            update_running_stats(&mut weights, graph, &acts, BN_RUNNING_MOMENTUM)?;
            loss_sum += loss;
            steps += 1;
        }
        epoch_losses.push(loss_sum / steps as f64);
    }
    Ok(TrainResult {
        weights,
        epoch_losses,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Confusion matrix (rows = true class, columns = predicted) plus the four
/// derived percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_specificity: f64,
}

impl EvalReport {
    pub fn metrics(&self) -> [(&'static str, f64); 4] {
        [
            ("accuracy", self.accuracy),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_specificity", self.macro_specificity),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, value) in self.metrics() {
            out.push_str(&format!("{name},{value:.6}\n"));
        }
        out
    }

    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut out = String::from("true\\pred");
        for c in 0..k {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Derive the four metrics from a confusion matrix. Per class:
/// precision = TP/(TP+FP), recall = TP/(TP+FN), specificity = TN/(TN+FP),
/// each 0 when its denominator is 0; macro = unweighted class mean; x100.
pub fn metrics_from_confusion(confusion: &[Vec<usize>]) -> (f64, f64, f64, f64) {
    let k = confusion.len();
    let total: usize = confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let accuracy = if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    };
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut specificity = 0.0;
    for c in 0..k {
        let tp = confusion[c][c];
        let fn_: usize = (0..k).filter(|&j| j != c).map(|j| confusion[c][j]).sum();
        let fp: usize = (0..k).filter(|&i| i != c).map(|i| confusion[i][c]).sum();
        let tn = total - tp - fn_ - fp;
        precision += if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        recall += if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        specificity += if tn + fp == 0 {
            0.0
        } else {
            tn as f64 / (tn + fp) as f64
        };
    }
    let k = k as f64;
    (
        accuracy,
        100.0 * precision / k,
        100.0 * recall / k,
        100.0 * specificity / k,
    )
}

/// Argmax evaluation over the whole dataset, batched.
pub fn evaluate(graph: &ModelGraph, weights: &ModelWeights, dataset: &Dataset) -> Result<EvalReport> {
    let k = graph.num_classes();
    let mut confusion = vec![vec![0usize; k]; k];
    let n = dataset.len();
    let step = 64usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + step).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (images, labels) = gather(dataset, &indices);
        let logits = forward_logits(graph, weights, &images)?;
        for (row, &label) in labels.iter().enumerate() {
            let mut best = 0usize;
            for c in 1..k {
                if logits.at2(row, c) > logits.at2(row, best) {
                    best = c;
                }
            }
            confusion[label][best] += 1;
        }
        start = end;
    }
    let (accuracy, macro_precision, macro_recall, macro_specificity) =
        metrics_from_confusion(&confusion);
    Ok(EvalReport {
        confusion,
        accuracy,
        macro_precision,
        macro_recall,
        macro_specificity,
    })
}

// ---------------------------------------------------------------------------
// Experiment pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Cifar10(std::path::PathBuf),
}

impl DatasetSource {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSource::Synthetic(spec) => generate_synthetic(spec),
            DatasetSource::Cifar10(dir) => load_cifar10(dir),
        }
    }

    /// Parse `synthetic:<config-path>`, `preset:<name>`, or `cifar10:<dir>`.
    pub fn parse(s: &str, base_seed: u64) -> Result<Self> {
        let Some((kind, rest)) = s.split_once(':') else {
            return Err(Error::InvalidArgument(format!(
                "dataset must be preset:<name>, synthetic:<config>, or cifar10:<dir>, got {s:?}"
            )));
        };
        match kind {
            "preset" => match rest {
                "idrid-synthetic" | "imbalanced3" => {
                    Ok(DatasetSource::Synthetic(SyntheticSpec::imbalanced3(base_seed)))
                }
                "balanced3" => Ok(DatasetSource::Synthetic(SyntheticSpec::balanced3(base_seed))),
                other => Err(Error::InvalidArgument(format!(
                    "unknown dataset preset {other:?}"
                ))),
            },
            "synthetic" => {
                let text = std::fs::read_to_string(rest)?;
                let mut spec = SyntheticSpec::from_config_str(&text, rest)?;
                if spec.seed == 0 {
                    spec.seed = base_seed;
                }
                Ok(DatasetSource::Synthetic(spec))
            }
            "cifar10" => Ok(DatasetSource::Cifar10(rest.into())),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset kind {other:?}"
            ))),
        }
    }
}

pub fn rank_with_method(
    method: RankMethod,
    graph: &ModelGraph,
    weights: &ModelWeights,
    dataset: &Dataset,
    batch_size: usize,
    batch_seed: u64,
) -> Result<RankVector> {
    match method {
        RankMethod::L1 => l1_rank(graph, weights, batch_seed),
        RankMethod::Beta => {
            let (batch, _) = sample_batch(dataset, batch_size.min(dataset.len()), batch_seed)?;
            beta_rank(graph, weights, &batch, batch_seed)
        }
        RankMethod::HRank => {
            let (batch, _) = sample_batch(dataset, batch_size.min(dataset.len()), batch_seed)?;
            hrank_score(graph, weights, &batch, batch_seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub arch: String,
    pub methods: Vec<RankMethod>,
    pub rates: RateMap,
    pub repetitions: usize,
    pub rank_batch: usize,
    pub baseline: TrainConfig,
    pub finetune: TrainConfig,
    pub seed: u64,
    /// Explicit per-repetition seeds; forces repetition determinism checks.
    pub rep_seeds: Option<Vec<u64>>,
    /// Worker threads for the repetition loop; 1 = sequential.
    pub jobs: usize,
}

impl ExperimentConfig {
    /// Parse the key = value pipeline config. Relative paths inside the
    /// file resolve against the file's own directory.
    pub fn from_config_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(std::path::Path::new("."));
        let pstr = path.to_string_lossy().into_owned();
        let mut dataset = None;
        let mut arch = None;
        let mut methods = vec![RankMethod::Beta, RankMethod::L1];
        let mut rates = None;
        let mut repetitions = 3usize;
        let mut rank_batch = 64usize;
        let mut seed = 0u64;
        let mut rep_seeds = None;
        let mut jobs = 1usize;
        let mut shared = TrainConfig::default();
        let mut baseline_epochs = shared.epochs;
        let mut finetune_epochs = shared.epochs;
        let mut finetune_lr = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |message: String| Error::Parse {
                path: pstr.clone(),
                message: format!("line {}: {message}", lineno + 1),
            };
            let Some((key, value)) = line.split_once('=') else {
                return Err(perr("expected key = value".into()));
            };
            let (key, value) = (key.trim(), value.trim());
            let resolve = |p: &str| -> std::path::PathBuf {
                let candidate = std::path::Path::new(p);
                if candidate.is_absolute() {
                    candidate.to_path_buf()
                } else {
                    base.join(candidate)
                }
            };
            match key {
                "dataset" => {
                    // Path-bearing dataset specs resolve relative to the file.
                    let spec = match value.split_once(':') {
                        Some(("synthetic", p)) => {
                            format!("synthetic:{}", resolve(p).to_string_lossy())
                        }
                        Some(("cifar10", p)) => {
                            format!("cifar10:{}", resolve(p).to_string_lossy())
                        }
                        _ => value.to_string(),
                    };
                    dataset = Some(spec);
                }
                "arch" => arch = Some(value.to_string()),
                "methods" => {
                    methods = value
                        .split(',')
                        .map(|m| RankMethod::parse(m.trim()))
                        .collect::<Result<_>>()?;
                }
                "rates" => {
                    let p = resolve(value);
                    let text = std::fs::read_to_string(&p)?;
                    rates = Some(RateMap::from_text(&text, &p.to_string_lossy())?);
                }
                "repetitions" => {
                    repetitions = value.parse().map_err(|_| perr("bad repetitions".into()))?
                }
                "rank_batch" => {
                    rank_batch = value.parse().map_err(|_| perr("bad rank_batch".into()))?
                }
                "seed" => seed = value.parse().map_err(|_| perr("bad seed".into()))?,
                "jobs" => jobs = value.parse().map_err(|_| perr("bad jobs".into()))?,
                "rep_seeds" => {
                    rep_seeds = Some(
                        value
                            .split(',')
                            .map(|s| s.trim().parse().map_err(|_| perr("bad rep seed".into())))
                            .collect::<Result<Vec<u64>>>()?,
                    );
                }
                "baseline_epochs" => {
                    baseline_epochs = value.parse().map_err(|_| perr("bad epochs".into()))?
                }
                "finetune_epochs" => {
                    finetune_epochs = value.parse().map_err(|_| perr("bad epochs".into()))?
                }
                "batch_size" => {
                    shared.batch_size = value.parse().map_err(|_| perr("bad batch_size".into()))?
                }
                "lr" => shared.lr = value.parse().map_err(|_| perr("bad lr".into()))?,
                "finetune_lr" => {
                    finetune_lr =
                        Some(value.parse().map_err(|_| perr("bad finetune_lr".into()))?)
                }
                "momentum" => {
                    shared.momentum = value.parse().map_err(|_| perr("bad momentum".into()))?
                }
                "weight_decay" => {
                    shared.weight_decay =
                        value.parse().map_err(|_| perr("bad weight_decay".into()))?
                }
                "augment" => {
                    shared.augment = value
                        .parse::<u8>()
                        .map_err(|_| perr("augment must be 0 or 1".into()))?
                        != 0
                }
                other => return Err(perr(format!("unknown key {other:?}"))),
            }
        }
        let dataset_str = dataset.ok_or_else(|| Error::Parse {
            path: pstr.clone(),
            message: "missing dataset".into(),
        })?;
        let dataset = DatasetSource::parse(&dataset_str, seed)?;
        let arch = arch.ok_or_else(|| Error::Parse {
            path: pstr.clone(),
            message: "missing arch".into(),
        })?;
        let rates = rates.ok_or_else(|| Error::Parse {
            path: pstr,
            message: "missing rates".into(),
        })?;
        let mut baseline = shared.clone();
        baseline.epochs = baseline_epochs;
        let mut finetune = shared;
        finetune.epochs = finetune_epochs;
        if let Some(lr) = finetune_lr {
            finetune.lr = lr;
        }
        Ok(ExperimentConfig {
            dataset,
            arch,
            methods,
            rates,
            repetitions,
            rank_batch,
            baseline,
            finetune,
            seed,
            rep_seeds,
            jobs,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricAggregate {
    pub metric: &'static str,
    pub mean: f64,
    /// Population standard deviation across repetitions.
    pub std: f64,
    pub per_rep: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub method: String,
    pub flops: u64,
    pub params: u64,
    pub metrics: Vec<MetricAggregate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<MethodReport>,
}

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,flops,params,metric,mean,std\n");
        for row in &self.rows {
            for m in &row.metrics {
                out.push_str(&format!(
                    "{},{},{},{},{:.6},{:.6}\n",
                    row.method, row.flops, row.params, m.metric, m.mean, m.std
                ));
            }
        }
        out
    }

    pub fn row(&self, method: &str) -> Option<&MethodReport> {
        self.rows.iter().find(|r| r.method == method)
    }
}

pub fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Full pipeline: train one baseline, then per method and repetition
/// rank -> select -> construct -> transfer -> fine-tune -> evaluate.
/// Reports mean and population std per metric, plus a baseline row.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    if config.repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be >= 1".into()));
    }
    if let Some(seeds) = &config.rep_seeds {
        if seeds.len() != config.repetitions {
            return Err(Error::InvalidArgument(
                "rep_seeds length must equal repetitions".into(),
            ));
        }
    }
    let (train_ds, val_ds) = config.dataset.load()?;
    let (c, h, w) = train_ds.image_shape();
    let graph = crate::arch::build_architecture(&config.arch, (c, h, w), train_ds.num_classes)?;
    let baseline_report = count_flops_params(&graph)?;

    let mut baseline_cfg = config.baseline.clone();
    baseline_cfg.seed = derive_seed(config.seed, tag("baseline"));
    let init = crate::graph::init_weights(&graph, derive_seed(config.seed, tag("init")))?;
    let trained = train(&graph, &init, &train_ds, &baseline_cfg)?;
    let baseline_eval = evaluate(&graph, &trained.weights, &val_ds)?;

    let mut rows = Vec::new();
    rows.push(MethodReport {
        method: "baseline".into(),
        flops: baseline_report.total_flops,
        params: baseline_report.total_params,
        metrics: baseline_eval
            .metrics()
            .iter()
            .map(|&(name, v)| MetricAggregate {
                metric: name,
                mean: v,
                std: 0.0,
                per_rep: vec![v],
            })
            .collect(),
    });

    let rates = config.rates.resolve(&graph)?;
    for &method in &config.methods {
        let rep_results = crate::parallel::parallel_map(
            config.repetitions,
            config.jobs,
            |rep| -> Result<(EvalReport, u64, u64)> {
                let rep_seed = match &config.rep_seeds {
                    Some(seeds) => seeds[rep],
                    None => derive_seed(config.seed, tag("rep") ^ rep as u64),
                };
                let rank = rank_with_method(
                    method,
                    &graph,
                    &trained.weights,
                    &train_ds,
                    config.rank_batch,
                    derive_seed(rep_seed, tag("rank-batch")),
                )
                .map_err(|e| tag_rep_error(e, rep))?;
                let plan = select_top_filters(&graph, &rank, &rates)
                    .map_err(|e| tag_rep_error(e, rep))?;
                let outcome =
                    construct_pruned(&graph, &trained.weights, &plan, ProtectedPolicy::Warn)
                        .map_err(|e| tag_rep_error(e, rep))?;
                let mut ft_cfg = config.finetune.clone();
                ft_cfg.seed = derive_seed(rep_seed, tag("finetune"));
                let tuned = train(&outcome.graph, &outcome.weights, &train_ds, &ft_cfg)
                    .map_err(|e| tag_rep_error(e, rep))?;
                let eval = evaluate(&outcome.graph, &tuned.weights, &val_ds)
                    .map_err(|e| tag_rep_error(e, rep))?;
                Ok((
                    eval,
                    outcome.report.total_flops,
                    outcome.report.total_params,
                ))
            },
        );
        let mut per_metric: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
        let mut pruned_counts: Option<(u64, u64)> = None;
        for result in rep_results {
            let (eval, flops, params) = result?;
            for (name, v) in eval.metrics() {
                per_metric.entry(name).or_default().push(v);
            }
            pruned_counts = Some((flops, params));
        }
        let (flops, params) = pruned_counts.expect("at least one repetition");
        let metric_order = ["accuracy", "macro_precision", "macro_recall", "macro_specificity"];
        let metrics = metric_order
            .iter()
            .map(|&name| {
                let values = &per_metric[name];
                let (mean, std) = mean_and_population_std(values);
                MetricAggregate {
                    metric: name,
                    mean,
                    std,
                    per_rep: values.clone(),
                }
            })
            .collect();
        rows.push(MethodReport {
            method: method.name().into(),
            flops,
            params,
            metrics,
        });
    }
    Ok(ExperimentReport { rows })
}

fn tag_rep_error(e: Error, rep: usize) -> Error {
    Error::InvalidArgument(format!("repetition {rep}: {e}"))
}
