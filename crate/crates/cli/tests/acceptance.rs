//! Acceptance criterion 8: the full pipeline with a fixed seed produces
//! byte-identical report CSVs across two runs.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_betarank")
}

fn repo_config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run_ok(args: &[&str]) {
    let output = Command::new(bin()).args(args).output().expect("spawn");
    assert!(
        output.status.success(),
        "betarank {args:?} failed:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
}

/// train-baseline -> rank -> prune -> finetune -> eval with a fixed seed.
fn run_pipeline(dir: &Path) {
    let d = |name: &str| dir.join(name).to_string_lossy().into_owned();
    run_ok(&[
        "train-baseline",
        "--arch",
        "toycnn",
        "--data",
        "preset:idrid-synthetic",
        "--epochs",
        "2",
        "--lr",
        "0.05",
        "--seed",
        "7",
        "--out",
        &d("base"),
    ]);
    run_ok(&[
        "rank",
        "--model",
        &d("base/model"),
        "--method",
        "beta",
        "--data",
        "preset:idrid-synthetic",
        "--batch-size",
        "64",
        "--seed",
        "7",
        "--out",
        &d("ranks"),
    ]);
    run_ok(&[
        "prune",
        "--model",
        &d("base/model"),
        "--ranks",
        &d("ranks/ranks.csv"),
        "--rates",
        repo_config("toycnn_pr40.txt").to_str().unwrap(),
        "--out",
        &d("pruned"),
    ]);
    run_ok(&[
        "finetune",
        "--model",
        &d("pruned/model"),
        "--data",
        "preset:idrid-synthetic",
        "--epochs",
        "2",
        "--seed",
        "7",
        "--out",
        &d("tuned"),
    ]);
    run_ok(&[
        "eval",
        "--model",
        &d("tuned/model"),
        "--data",
        "preset:idrid-synthetic",
        "--out",
        &d("eval"),
    ]);
}

#[test]
fn criterion_08_end_to_end_determinism() {
    let t0 = Instant::now();
    let root = std::env::temp_dir().join(format!("betarank-c8-{}", std::process::id()));
    let run1 = root.join("run1");
    let run2 = root.join("run2");
    for dir in [&run1, &run2] {
        if dir.exists() {
            std::fs::remove_dir_all(dir).unwrap();
        }
        std::fs::create_dir_all(dir).unwrap();
        run_pipeline(dir);
    }
    // Every produced artifact must match byte for byte.
    for rel in [
        "base/model.manifest",
        "base/model.blob",
        "base/loss_curve.csv",
        "ranks/ranks.csv",
        "pruned/model.manifest",
        "pruned/model.blob",
        "pruned/plan.txt",
        "pruned/flops.csv",
        "tuned/model.manifest",
        "tuned/model.blob",
        "tuned/loss_curve.csv",
        "eval/eval.csv",
        "eval/confusion.csv",
    ] {
        let a = std::fs::read(run1.join(rel)).unwrap_or_else(|_| panic!("missing {rel}"));
        let b = std::fs::read(run2.join(rel)).unwrap_or_else(|_| panic!("missing {rel}"));
        assert_eq!(a, b, "artifact {rel} differs between identical runs");
    }
    println!(
        "ACCEPTANCE 8 end-to-end determinism: PASS ({:.2}s)",
        t0.elapsed().as_secs_f64()
    );
}
