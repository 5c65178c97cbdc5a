//! Interrupting a run and resuming from its checkpoint gives the same
//! metrics and the same final checkpoint bytes as an uninterrupted run.
//!
//! cargo run --release --example checkpoint_resume

use batchwise_dropout::cli::{cmd_train, read_metrics, CommonOptions, RunConfig, CHECKPOINT_FILE, METRICS_FILE};

const CONFIG: &str = r#"{
  "data": { "kind": "artificial", "spec": {
    "classes": 4, "dim": 30, "walk_len": 20, "flip": 0.2,
    "train_per_class": 100, "test_per_class": 50, "seed": 3 } },
  "model": { "kind": "fc", "widths": [30, 60, 60, 4], "drop": [0.2, 0.5, 0.5] },
  "train": { "path": "batchwise", "optimizer": { "rate": 0.1, "momentum": 0.9 }, "batch": 20 },
  "epochs": 6,
  "seed": 5,
  "checkpoint_every": 2
}"#;

fn main() -> batchwise_dropout::Result<()> {
    let root = std::env::temp_dir().join(format!("bwd-resume-{}", std::process::id()));
    let opts = |dir: &str| CommonOptions { seed: None, out: Some(root.join(dir)), deterministic: true, threads: 1 };
    let full = RunConfig::from_json(CONFIG)?;

    let whole = cmd_train(&full, &opts("whole"), false)?;

    let mut first = full.clone();
    first.epochs = 3;
    cmd_train(&first, &opts("split"), false)?;
    println!("stopped after epoch 3, resuming");
    cmd_train(&full, &opts("split"), true)?;

    let logged = read_metrics(root.join("split").join(METRICS_FILE))?;
    let same_errors = whole.epochs.len() == logged.epochs.len()
        && whole.epochs.iter().zip(&logged.epochs).all(|(a, b)| a.test_error == b.test_error && a.mults == b.mults);
    println!("logged test errors and multiplication counts identical: {same_errors}");
    let same_bytes = std::fs::read(root.join("whole").join(CHECKPOINT_FILE)).ok()
        == std::fs::read(root.join("split").join(CHECKPOINT_FILE)).ok();
    println!("final checkpoints identical: {same_bytes}");
    std::fs::remove_dir_all(&root).ok();
    Ok(())
}
