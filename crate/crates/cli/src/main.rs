//! Stage-separated command-line pipeline: every subcommand wraps one library
//! operation and leaves inspectable artifacts plus a provenance manifest in
//! its output directory. Inputs are never mutated. All randomness flows
//! from --seed.

mod args;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use args::{ArgError, ArgSpec, Args};
use betarank_core::analysis::{bench_model, gradcam, stability_fraction, BenchReport, Ranker};
use betarank_core::arch::build_architecture;
use betarank_core::dataio::{Dataset, Split};
use betarank_core::error::Error as CoreError;
use betarank_core::flops::count_flops_params;
use betarank_core::graph::{init_weights, ModelGraph, ModelWeights};
use betarank_core::pruning::{construct_pruned, select_top_filters, ProtectedPolicy, RateMap};
use betarank_core::ranking::{RankMethod, RankVector};
use betarank_core::rng::{derive_seed, tag};
use betarank_core::serialize::{load_model, save_model};
use betarank_core::trainer::{
    evaluate, rank_with_method, run_experiment, train, DatasetSource, ExperimentConfig,
    TrainConfig,
};

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_CONFIG: u8 = 4;
const EXIT_RUNTIME: u8 = 5;

const HELP: &str = "betarank - filter ranking, structured pruning, and evaluation for small CNNs

USAGE:
    betarank <SUBCOMMAND> [FLAGS]

SUBCOMMANDS:
    flops           Count FLOPs and parameters of an architecture or model file
    train-baseline  Train a model from scratch and save it
    rank            Score conv filters (l1 | beta | hrank) and write a CSV
    prune           Select filters from a rank CSV and perform graph surgery
    finetune        Continue training a (pruned) model
    eval            Confusion matrix and macro metrics on a dataset split
    stability       Re-ranking stability fractions over repeated batches
    gradcam         Class-activation heatmap for one image (PGM + CSV)
    bench           Single-image inference time and peak tensor allocation
    experiment      Full rank/prune/fine-tune/eval pipeline with repetitions
    help            Print this text

COMMON FLAGS:
    --out DIR         output directory (artifacts + run_manifest.txt)
    --model PREFIX    model file prefix (reads PREFIX.manifest, PREFIX.blob)
    --data SPEC       preset:idrid-synthetic | preset:balanced3 |
                      synthetic:<config-file> | cifar10:<dir>
    --split NAME      train | validation (default depends on the command)
    --seed N          64-bit seed for all randomness (default 0)
    --jobs N          worker threads for repetition loops (default 1)

SYNTHETIC DATASET OVERRIDES (any command taking --data, synthetic only):
    --counts A,B,..   per-class training counts
    --val-counts ..   per-class validation counts
    --image-size CxHxW
    --noise-std F     Gaussian pixel noise level
    --data-seed N     generator seed (independent of --seed)

PER-SUBCOMMAND FLAGS:
    flops           --arch NAME --input CxHxW --classes K | --model PREFIX
    train-baseline  --arch NAME --data SPEC [--epochs N --batch-size N --lr F
                    --momentum F --weight-decay F --augment]
    rank            --model PREFIX --method l1|beta|hrank --data SPEC
                    [--batch-size N] (default 256, or 16 when height > 64)
    prune           --model PREFIX --ranks CSV --rates FILE
    finetune        --model PREFIX --data SPEC [training flags as above]
    eval            --model PREFIX --data SPEC [--split validation]
    stability       --model PREFIX --method NAME --data SPEC
                    [--repetitions N --quantile F --batch-size N]
    gradcam         --model PREFIX --data SPEC [--split validation]
                    --index I [--class C]
    bench           --model PREFIX [--baseline PREFIX] [--repetitions N
                    --warmup N]
    experiment      --config FILE [--jobs N]

EXIT CODES:
    0  success
    2  usage error (unknown flag, missing flag, bad flag value)
    3  missing file or other I/O failure
    4  config, manifest, or CSV parse error
    5  runtime failure (shape errors, divergence, invalid arguments)
";

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.one_line());
            ExitCode::from(err.code())
        }
    }
}

enum CliError {
    Usage(String),
    Core(CoreError),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e {
                CoreError::Io(_) => EXIT_IO,
                CoreError::Parse { .. }
                | CoreError::VersionMismatch { .. }
                | CoreError::BlobMismatch { .. } => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            },
        }
    }

    fn one_line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m.clone()),
            CliError::Core(e) => match e {
                CoreError::Io(_) => ("io", e.to_string()),
                CoreError::Parse { .. }
                | CoreError::VersionMismatch { .. }
                | CoreError::BlobMismatch { .. } => ("config", e.to_string()),
                _ => ("runtime", e.to_string()),
            },
        };
        format!(
            "error: code={} kind={kind}: {}",
            self.code(),
            msg.replace('\n', " ")
        )
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl From<ArgError> for CliError {
    fn from(e: ArgError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Core(CoreError::Io(e))
}

type CliResult = Result<(), CliError>;

fn run(argv: &[String]) -> CliResult {
    let Some(sub) = argv.first() else {
        println!("{HELP}");
        return Err(CliError::Usage("missing subcommand".into()));
    };
    let rest = &argv[1..];
    match sub.as_str() {
        "help" | "--help" | "-h" => {
            println!("{HELP}");
            Ok(())
        }
        "flops" => cmd_flops(rest),
        "train-baseline" => cmd_train_baseline(rest),
        "rank" => cmd_rank(rest),
        "prune" => cmd_prune(rest),
        "finetune" => cmd_finetune(rest),
        "eval" => cmd_eval(rest),
        "stability" => cmd_stability(rest),
        "gradcam" => cmd_gradcam(rest),
        "bench" => cmd_bench(rest),
        "experiment" => cmd_experiment(rest),
        other => Err(CliError::Usage(format!(
            "unknown subcommand {other:?} (see betarank help)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn out_dir(args: &Args) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(args.require("out")?);
    fs::create_dir_all(&dir).map_err(io_err)?;
    Ok(dir)
}

fn write_manifest(
    dir: &Path,
    subcommand: &str,
    resolved: &[(String, String)],
    outputs: &[&str],
) -> CliResult {
    let mut text = format!("subcommand = {subcommand}\n");
    let mut sorted: Vec<(String, String)> = resolved.to_vec();
    sorted.sort();
    for (k, v) in sorted {
        text.push_str(&format!("{k} = {v}\n"));
    }
    for o in outputs {
        text.push_str(&format!("output = {o}\n"));
    }
    fs::write(dir.join("run_manifest.txt"), text).map_err(io_err)?;
    Ok(())
}

fn load_model_flag(args: &Args) -> Result<(ModelGraph, ModelWeights, String), CliError> {
    let prefix = args.require("model")?;
    let (graph, weights) = load_model(Path::new(prefix))?;
    Ok((graph, weights, prefix.to_string()))
}

/// Flags that override fields of a synthetic dataset spec in place.
const SYNTH_FLAGS: [&str; 5] = ["counts", "val-counts", "image-size", "noise-std", "data-seed"];

fn parse_usize_list(flag: &str, value: &str) -> Result<Vec<usize>, CliError> {
    value
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--{flag}: bad integer list {value:?}")))
}

fn load_dataset(args: &Args, seed: u64) -> Result<(Dataset, Dataset, String), CliError> {
    let spec = args.require("data")?;
    let mut source = DatasetSource::parse(spec, seed)?;
    let overrides_given = SYNTH_FLAGS.iter().any(|f| args.get(f).is_some());
    if overrides_given {
        let DatasetSource::Synthetic(synth) = &mut source else {
            return Err(CliError::Usage(
                "synthetic overrides only apply to synthetic or preset datasets".into(),
            ));
        };
        if let Some(v) = args.get("counts") {
            synth.per_class_counts = parse_usize_list("counts", v)?;
        }
        if let Some(v) = args.get("val-counts") {
            synth.val_counts = Some(parse_usize_list("val-counts", v)?);
        }
        if let Some(v) = args.get("image-size") {
            synth.image_size = parse_input_shape(v)?;
        }
        if let Some(v) = args.get("noise-std") {
            synth.noise_std = v
                .parse()
                .map_err(|_| CliError::Usage(format!("--noise-std: bad float {v:?}")))?;
        }
        if let Some(v) = args.get("data-seed") {
            synth.seed = v
                .parse()
                .map_err(|_| CliError::Usage(format!("--data-seed: bad seed {v:?}")))?;
        }
        synth.validate()?;
    }
    let (train, val) = source.load()?;
    Ok((train, val, spec.to_string()))
}

fn pick_split<'d>(args: &Args, train: &'d Dataset, val: &'d Dataset, default: Split) -> Result<&'d Dataset, CliError> {
    let split = match args.get("split") {
        None => default,
        Some("train") => Split::Train,
        Some("validation") => Split::Validation,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "--split must be train or validation, got {other:?}"
            )))
        }
    };
    Ok(match split {
        Split::Train => train,
        Split::Validation => val,
    })
}

fn train_config_from(args: &Args, seed: u64) -> Result<TrainConfig, CliError> {
    let defaults = TrainConfig::default();
    Ok(TrainConfig {
        epochs: args.parsed("epochs", defaults.epochs)?,
        batch_size: args.parsed("batch-size", defaults.batch_size)?,
        lr: args.parsed("lr", defaults.lr)?,
        momentum: args.parsed("momentum", defaults.momentum)?,
        weight_decay: args.parsed("weight-decay", defaults.weight_decay)?,
        lr_milestones: defaults.lr_milestones,
        lr_factor: defaults.lr_factor,
        seed,
        augment: args.switch("augment"),
    })
}

fn train_flags(cfg: &TrainConfig) -> Vec<(String, String)> {
    vec![
        ("epochs".into(), cfg.epochs.to_string()),
        ("batch-size".into(), cfg.batch_size.to_string()),
        ("lr".into(), cfg.lr.to_string()),
        ("momentum".into(), cfg.momentum.to_string()),
        ("weight-decay".into(), cfg.weight_decay.to_string()),
        ("augment".into(), cfg.augment.to_string()),
    ]
}

fn parse_input_shape(s: &str) -> Result<(usize, usize, usize), CliError> {
    let dims: Vec<usize> = s
        .split(['x', ','])
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--input must look like 3x32x32, got {s:?}")))?;
    if dims.len() != 3 {
        return Err(CliError::Usage("--input needs three dimensions".into()));
    }
    Ok((dims[0], dims[1], dims[2]))
}

fn default_rank_batch(graph: &ModelGraph) -> usize {
    let (_, h, _) = graph.input_shape();
    if h > 64 {
        16
    } else {
        256
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_flops(argv: &[String]) -> CliResult {
    let spec = ArgSpec {
        valued: &["arch", "input", "classes", "model", "out"],
        switches: &[],
    };
    let args = Args::parse(argv, &spec)?;
    let dir = out_dir(&args)?;
    let (graph, label) = if let Some(prefix) = args.get("model") {
        let (graph, _) = load_model(Path::new(prefix))?;
        (graph, prefix.to_string())
    } else {
        let arch = args.require("arch")?;
        let input = parse_input_shape(args.get("input").unwrap_or("3x32x32"))?;
        let classes: usize = args.parsed("classes", 10)?;
        (build_architecture(arch, input, classes)?, arch.to_string())
    };
    let report = count_flops_params(&graph)?;
    println!(
        "{label}: {:.2}M FLOPs, {:.2}M params",
        report.total_flops as f64 / 1e6,
        report.total_params as f64 / 1e6
    );
    fs::write(dir.join("flops.csv"), report.to_csv()).map_err(io_err)?;
    write_manifest(&dir, "flops", &args.resolved(), &["flops.csv"])
}

fn cmd_train_baseline(argv: &[String]) -> CliResult {
    let spec = ArgSpec {
        valued: &[
            "arch", "data", "out", "epochs", "batch-size", "lr", "momentum", "weight-decay",
            "seed", "counts", "val-counts", "image-size", "noise-std", "data-seed",
        ],
        switches: &["augment"],
    };
    let args = Args::parse(argv, &spec)?;
    let dir = out_dir(&args)?;
    let seed: u64 = args.parsed("seed", 0)?;
    let arch = args.require("arch")?;
    let (train_ds, _, data_label) = load_dataset(&args, seed)?;
    let (c, h, w) = train_ds.image_shape();
    let graph = build_architecture(arch, (c, h, w), train_ds.num_classes)?;
    let cfg = train_config_from(&args, derive_seed(seed, tag("baseline")))?;
    let init = init_weights(&graph, derive_seed(seed, tag("init")))?;
    let result = train(&graph, &init, &train_ds, &cfg)?;
    save_model(&graph, &result.weights, &dir.join("model"))?;
    let mut curve = String::from("epoch,mean_loss\n");
    for (i, l) in result.epoch_losses.iter().enumerate() {
        curve.push_str(&format!("{i},{l:.8}\n"));
    }
    fs::write(dir.join("loss_curve.csv"), curve).map_err(io_err)?;
    println!(
        "trained {arch} on {data_label} for {} epochs, final loss {:.6}",
        cfg.epochs,
        result.epoch_losses.last().unwrap()
    );
    let mut resolved = args.resolved();
    resolved.extend(train_flags(&cfg));
    resolved.push(("seed".into(), seed.to_string()));
    write_manifest(
        &dir,
        "train-baseline",
        &resolved,
        &["model.manifest", "model.blob", "loss_curve.csv"],
    )
}

fn cmd_rank(argv: &[String]) -> CliResult {
    let spec = ArgSpec {
        valued: &["model", "method", "data", "out", "batch-size", "seed", "split", "counts", "val-counts", "image-size", "noise-std", "data-seed"],
        switches: &[],
    };
    let args = Args::parse(argv, &spec)?;
    let dir = out_dir(&args)?;
    let seed: u64 = args.parsed("seed", 0)?;
    let method = RankMethod::parse(args.require("method")?)?;
    let (graph, weights, _) = load_model_flag(&args)?;
    let (train_ds, val_ds, _) = load_dataset(&args, seed)?;
    let ds = pick_split(&args, &train_ds, &val_ds, Split::Train)?;
    let batch_size: usize = args.parsed("batch-size", default_rank_batch(&graph))?;
    let batch_seed = derive_seed(seed, tag("rank-batch"));
    let rank = rank_with_method(method, &graph, &weights, ds, batch_size, batch_seed)?;
    fs::write(dir.join("ranks.csv"), rank.to_csv()).map_err(io_err)?;
    println!(
        "ranked {} conv layers with {} (batch seed {batch_seed})",
        rank.layers.len(),
        method.name()
    );
    let mut resolved = args.resolved();
    resolved.push(("batch-size".into(), batch_size.to_string()));
    resolved.push(("seed".into(), seed.to_string()));
    write_manifest(&dir, "rank", &resolved, &["ranks.csv"])
}

fn cmd_prune(argv: &[String]) -> CliResult {
    let spec = ArgSpec {
        valued: &["model", "ranks", "rates", "out"],
        switches: &[],
    };
    let args = Args::parse(argv, &spec)?;
    let dir = out_dir(&args)?;
    let (graph, weights, _) = load_model_flag(&args)?;
    let ranks_path = args.require("ranks")?;
    let rank_text = fs::read_to_string(ranks_path).map_err(io_err)?;
    let rank = RankVector::from_csv(&rank_text, ranks_path)?;
    let rates_path = args.require("rates")?;
    let rates_text = fs::read_to_string(rates_path).map_err(io_err)?;
    let rates = RateMap::from_text(&rates_text, rates_path)?.resolve(&graph)?;
    let plan = select_top_filters(&graph, &rank, &rates)?;
    let outcome = construct_pruned(&graph, &weights, &plan, ProtectedPolicy::Warn)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    save_model(&outcome.graph, &outcome.weights, &dir.join("model"))?;
    fs::write(dir.join("plan.txt"), plan.to_text()).map_err(io_err)?;
    fs::write(dir.join("flops.csv"), outcome.report.to_csv()).map_err(io_err)?;
    let r = outcome.report.reduction.expect("baseline attached");
    println!(
        "pruned: {:.2}M FLOPs ({:.1}% reduction), {:.2}M params ({:.1}% reduction)",
        outcome.report.total_flops as f64 / 1e6,
        r.flops_pct,
        outcome.report.total_params as f64 / 1e6,
        r.params_pct
    );
    write_manifest(
        &dir,
        "prune",
        &args.resolved(),
        &["model.manifest", "model.blob", "plan.txt", "flops.csv"],
    )
}

fn cmd_finetune(argv: &[String]) -> CliResult {
    let spec = ArgSpec {
        valued: &[
            "model", "data", "out", "epochs", "batch-size", "lr", "momentum", "weight-decay",
            "seed", "counts", "val-counts", "image-size", "noise-std", "data-seed",
        ],
        switches: &["augment"],
    };
    let args = Args::parse(argv, &spec)?;
    let dir = out_dir(&args)?;
    let seed: u64 = args.parsed("seed", 0)?;
    let (graph, weights, _) = load_model_flag(&args)?;
    let (train_ds, _, _) = load_dataset(&args, seed)?;
    let cfg = train_config_from(&args, derive_seed(seed, tag("finetune")))?;
    let result = train(&graph, &weights, &train_ds, &cfg)?;
    save_model(&graph, &result.weights, &dir.join("model"))?;
    let mut curve = String::from("epoch,mean_loss\n");
    for (i, l) in result.epoch_losses.iter().enumerate() {
        curve.push_str(&format!("{i},{l:.8}\n"));
    }
    fs::write(dir.join("loss_curve.csv"), curve).map_err(io_err)?;
    println!(
        "fine-tuned for {} epochs, final loss {:.6}",
        cfg.epochs,
        result.epoch_losses.last().unwrap()
    );
    let mut resolved = args.resolved();
    resolved.extend(train_flags(&cfg));
    resolved.push(("seed".into(), seed.to_string()));
    write_manifest(
        &dir,
        "finetune",
        &resolved,
        &["model.manifest", "model.blob", "loss_curve.csv"],
    )
}

fn cmd_eval(argv: &[String]) -> CliResult {
    let spec = ArgSpec {
        valued: &["model", "data", "out", "split", "seed", "counts", "val-counts", "image-size", "noise-std", "data-seed"],
        switches: &[],
    };
    let args = Args::parse(argv, &spec)?;
    let dir = out_dir(&args)?;
    let seed: u64 = args.parsed("seed", 0)?;
    let (graph, weights, _) = load_model_flag(&args)?;
    let (train_ds, val_ds, _) = load_dataset(&args, seed)?;
    let ds = pick_split(&args, &train_ds, &val_ds, Split::Validation)?;
    let report = evaluate(&graph, &weights, ds)?;
    fs::write(dir.join("eval.csv"), report.to_csv()).map_err(io_err)?;
    fs::write(dir.join("confusion.csv"), report.confusion_csv()).map_err(io_err)?;
    println!(
        "accuracy {:.2}, macro precision {:.2}, macro recall {:.2}, macro specificity {:.2}",
        report.accuracy, report.macro_precision, report.macro_recall, report.macro_specificity
    );
    write_manifest(&dir, "eval", &args.resolved(), &["eval.csv", "confusion.csv"])
}

fn cmd_stability(argv: &[String]) -> CliResult {
    let spec = ArgSpec {
        valued: &[
            "model", "method", "data", "out", "repetitions", "quantile", "batch-size", "seed",
            "jobs", "split", "counts", "val-counts", "image-size", "noise-std", "data-seed",
        ],
        switches: &[],
    };
    let args = Args::parse(argv, &spec)?;
    let dir = out_dir(&args)?;
    let seed: u64 = args.parsed("seed", 0)?;
    let method = RankMethod::parse(args.require("method")?)?;
    let (graph, weights, _) = load_model_flag(&args)?;
    let (train_ds, val_ds, _) = load_dataset(&args, seed)?;
    let ds = pick_split(&args, &train_ds, &val_ds, Split::Train)?;
    let repetitions: usize = args.parsed("repetitions", 3)?;
    let quantile: f64 = args.parsed("quantile", 0.25)?;
    let batch_size: usize = args.parsed("batch-size", default_rank_batch(&graph))?;
    let jobs: usize = args.parsed("jobs", 1)?;
    let ranker: Box<Ranker> = Box::new(move |g, w, batch, batch_seed| match method {
        RankMethod::L1 => betarank_core::ranking::l1_rank(g, w, batch_seed),
        RankMethod::Beta => betarank_core::ranking::beta_rank(g, w, batch, batch_seed),
        RankMethod::HRank => betarank_core::ranking::hrank_score(g, w, batch, batch_seed),
    });
    let report = stability_fraction(
        &graph,
        &weights,
        &ranker,
        ds,
        batch_size,
        repetitions,
        quantile,
        seed,
        jobs,
    )?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    fs::write(dir.join("stability.csv"), report.to_csv()).map_err(io_err)?;
    println!(
        "mean top-quantile stability fraction over {} layers: {:.4}",
        report.rows.len(),
        report.mean_top_fraction()
    );
    let mut resolved = args.resolved();
    resolved.push(("repetitions".into(), repetitions.to_string()));
    resolved.push(("quantile".into(), quantile.to_string()));
    resolved.push(("batch-size".into(), batch_size.to_string()));
    write_manifest(&dir, "stability", &resolved, &["stability.csv"])
}

fn cmd_gradcam(argv: &[String]) -> CliResult {
    let spec = ArgSpec {
        valued: &["model", "data", "out", "split", "index", "class", "seed", "counts", "val-counts", "image-size", "noise-std", "data-seed"],
        switches: &[],
    };
    let args = Args::parse(argv, &spec)?;
    let dir = out_dir(&args)?;
    let seed: u64 = args.parsed("seed", 0)?;
    let (graph, weights, _) = load_model_flag(&args)?;
    let (train_ds, val_ds, _) = load_dataset(&args, seed)?;
    let ds = pick_split(&args, &train_ds, &val_ds, Split::Validation)?;
    let index: usize = args.parsed("index", 0)?;
    if index >= ds.len() {
        return Err(CliError::Usage(format!(
            "--index {index} out of range for split of {} samples",
            ds.len()
        )));
    }
    let (image, labels) = betarank_core::dataio::gather(ds, &[index]);
    let target: usize = args.parsed("class", labels[0])?;
    let map = gradcam(&graph, &weights, &image, target)?;
    let stem = format!("gradcam_c{}_p{:.4}", map.target_class, map.probability);
    let pgm_name = format!("{stem}.pgm");
    let csv_name = format!("{stem}.csv");
    fs::write(dir.join(&pgm_name), map.to_pgm()).map_err(io_err)?;
    fs::write(dir.join(&csv_name), map.to_csv()).map_err(io_err)?;
    println!(
        "class {} probability {:.4}, heatmap written to {pgm_name}",
        map.target_class, map.probability
    );
    write_manifest(&dir, "gradcam", &args.resolved(), &[&pgm_name, &csv_name])
}

fn cmd_bench(argv: &[String]) -> CliResult {
    let spec = ArgSpec {
        valued: &["model", "baseline", "out", "repetitions", "warmup", "seed", "dataset"],
        switches: &[],
    };
    let args = Args::parse(argv, &spec)?;
    let dir = out_dir(&args)?;
    let seed: u64 = args.parsed("seed", 0)?;
    let repetitions: usize = args.parsed("repetitions", 5)?;
    let warmup: usize = args.parsed("warmup", 2)?;
    let mut report = BenchReport::default();
    if let Some(base_prefix) = args.get("baseline") {
        let (bg, bw) = load_model(Path::new(base_prefix))?;
        report
            .rows
            .push(bench_model("baseline", &bg, &bw, repetitions, warmup, seed)?);
    }
    let (graph, weights, prefix) = load_model_flag(&args)?;
    report
        .rows
        .push(bench_model(&prefix, &graph, &weights, repetitions, warmup, seed)?);
    let dataset_label = args.get("dataset").unwrap_or("-");
    fs::write(dir.join("bench.csv"), report.to_csv(dataset_label)).map_err(io_err)?;
    for row in &report.rows {
        println!(
            "{}: {:.3} ms mean ({:.3} std), peak transient {:.3} MiB",
            row.model,
            row.time_mean_ms,
            row.time_std_ms,
            row.peak_bytes as f64 / (1024.0 * 1024.0)
        );
    }
    let mut resolved = args.resolved();
    resolved.push(("repetitions".into(), repetitions.to_string()));
    resolved.push(("warmup".into(), warmup.to_string()));
    write_manifest(&dir, "bench", &resolved, &["bench.csv"])
}

fn cmd_experiment(argv: &[String]) -> CliResult {
    let spec = ArgSpec {
        valued: &["config", "out", "jobs"],
        switches: &[],
    };
    let args = Args::parse(argv, &spec)?;
    let dir = out_dir(&args)?;
    let config_path = args.require("config")?;
    let mut config = ExperimentConfig::from_config_file(Path::new(config_path))?;
    if let Some(j) = args.get("jobs") {
        config.jobs = j
            .parse()
            .map_err(|_| CliError::Usage(format!("bad --jobs value {j:?}")))?;
    }
    let report = run_experiment(&config)?;
    fs::write(dir.join("report.csv"), report.to_csv()).map_err(io_err)?;
    for row in &report.rows {
        let recall = row
            .metrics
            .iter()
            .find(|m| m.metric == "macro_recall")
            .expect("metric present");
        println!(
            "{}: {:.2}M flops, macro recall {:.2} +- {:.2}",
            row.method,
            row.flops as f64 / 1e6,
            recall.mean,
            recall.std
        );
    }
    write_manifest(&dir, "experiment", &args.resolved(), &["report.csv"])
}
