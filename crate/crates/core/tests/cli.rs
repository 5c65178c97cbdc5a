use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use batchwise_dropout::checkpoint::ModelSpec;
use batchwise_dropout::cli::{self, BenchConfig, CommonOptions, DataSource, PatternsConfig, RunConfig};
use batchwise_dropout::data::{gen_artificial, load_idx, ArtificialSpec};
use batchwise_dropout::model::Path as RunPath;
use batchwise_dropout::netfc::{FcNet, NetSpec};
use batchwise_dropout::train::evaluate;

fn tiny_spec() -> ArtificialSpec {
    ArtificialSpec { classes: 4, dim: 20, walk_len: 10, flip: 0.2, train_per_class: 50, test_per_class: 25, seed: 3, exact_flips: false }
}

fn tiny_config(path: &str) -> String {
    format!(
        r#"{{
  "data": {{ "kind": "artificial", "spec": {spec} }},
  "model": {{ "kind": "fc", "widths": [20, 16, 16, 4], "drop": [0.2, 0.5, 0.5] }},
  "train": {{ "path": "{path}", "optimizer": {{ "rate": 0.2, "momentum": 0.9 }}, "batch": 20 }},
  "epochs": 4,
  "seed": 5,
  "checkpoint_every": 2
}}"#,
        spec = serde_json::to_string(&tiny_spec()).unwrap()
    )
}

fn bwd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_bwd")).args(args).env("BWD_THREADS", "2").output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn opts(out: &Path) -> CommonOptions {
    CommonOptions { out: Some(out.to_path_buf()), deterministic: true, threads: 1, ..Default::default() }
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if name.starts_with("patterns_") {
            let cfg: PatternsConfig = cli::load_json(&path).unwrap();
            cfg.base.validate().unwrap();
        } else if name == "bench.json" {
            let _: BenchConfig = cli::load_json(&path).unwrap();
        } else if name == "artificial_data.json" {
            let spec: ArtificialSpec = cli::load_json(&path).unwrap();
            spec.validate().unwrap();
        } else {
            RunConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        seen += 1;
    }
    assert!(seen >= 8);
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = RunConfig::from_json(&tiny_config("batchwise")).unwrap();
    assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    let bad = tiny_config("batchwise").replace("\"epochs\": 4", "\"epochs\": 4, \"epoch\": 5");
    assert!(RunConfig::from_json(&bad).is_err());
    let bad = tiny_config("batchwise").replace("\"batch\": 20", "\"batch\": 20, \"bach\": 1");
    assert!(RunConfig::from_json(&bad).is_err());
    assert!(RunConfig::from_json(&tiny_config("sideways")).is_err());
}

#[test]
fn deterministic_runs_write_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.json", &tiny_config("batchwise"));
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = bwd(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--deterministic"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        files.push(fs::read(out.join(cli::METRICS_FILE)).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let text = String::from_utf8(files[0].clone()).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("schema,epoch,path,train_error_pct,test_error_pct,mean_loss,cumulative_mults,rate"));
}

#[test]
fn seed_flag_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_json(&tiny_config("independent")).unwrap();
    let a = cli::cmd_train(&cfg, &opts(&tmp.path().join("a")), false).unwrap();
    let o = CommonOptions { seed: Some(99), ..opts(&tmp.path().join("b")) };
    let b = cli::cmd_train(&cfg, &o, false).unwrap();
    assert_ne!(a.epochs[0].mean_loss, b.epochs[0].mean_loss);
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    for path in ["batchwise", "independent"] {
        let full = RunConfig::from_json(&tiny_config(path)).unwrap();
        let whole = tmp.path().join(format!("{path}-whole"));
        cli::cmd_train(&full, &opts(&whole), false).unwrap();

        let part = tmp.path().join(format!("{path}-part"));
        let mut short = full.clone();
        short.epochs = 2;
        cli::cmd_train(&short, &opts(&part), false).unwrap();
        cli::cmd_train(&full, &opts(&part), true).unwrap();

        assert_eq!(fs::read(whole.join(cli::METRICS_FILE)).unwrap(), fs::read(part.join(cli::METRICS_FILE)).unwrap(), "{path}");
        assert_eq!(fs::read(whole.join(cli::CHECKPOINT_FILE)).unwrap(), fs::read(part.join(cli::CHECKPOINT_FILE)).unwrap(), "{path}");
    }
}

#[test]
fn resume_truncates_rows_past_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let full = RunConfig::from_json(&tiny_config("batchwise")).unwrap();
    let reference = tmp.path().join("ref");
    cli::cmd_train(&full, &opts(&reference), false).unwrap();

    let out = tmp.path().join("run");
    let mut two = full.clone();
    two.epochs = 2;
    cli::cmd_train(&two, &opts(&out), false).unwrap();
    // Pretend a crash left an extra row for epoch 2 behind the checkpoint.
    let mut text = fs::read_to_string(out.join(cli::METRICS_FILE)).unwrap();
    let last = text.lines().last().unwrap().replacen(",1,", ",2,", 1);
    text.push_str(&last);
    text.push('\n');
    fs::write(out.join(cli::METRICS_FILE), text).unwrap();

    cli::cmd_train(&full, &opts(&out), true).unwrap();
    assert_eq!(fs::read(reference.join(cli::METRICS_FILE)).unwrap(), fs::read(out.join(cli::METRICS_FILE)).unwrap());
}

#[test]
fn resume_refuses_a_different_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_json(&tiny_config("batchwise")).unwrap();
    cli::cmd_train(&cfg, &opts(tmp.path()), false).unwrap();
    let mut other = cfg.clone();
    other.train.batch = 10;
    assert!(cli::cmd_train(&other, &opts(tmp.path()), true).is_err());
}

#[test]
fn eval_matches_the_final_logged_test_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_json(&tiny_config("batchwise")).unwrap();
    let metrics = cli::cmd_train(&cfg, &opts(tmp.path()), false).unwrap();
    let logged = cli::read_metrics(tmp.path().join(cli::METRICS_FILE)).unwrap();
    assert_eq!(logged.epochs.len(), metrics.epochs.len());
    let last = logged.last().unwrap();
    assert_eq!(last.test_error, metrics.last().unwrap().test_error);
    let err = cli::cmd_eval(&tmp.path().join(cli::CHECKPOINT_FILE), &cfg, &opts(tmp.path())).unwrap();
    assert_eq!(err, last.test_error);
    let err = cli::cmd_eval(&tmp.path().join(cli::CHECKPOINT_FILE), &cfg, &CommonOptions { threads: 3, ..opts(tmp.path()) }).unwrap();
    assert_eq!(err, last.test_error);
}

#[test]
fn f64_runs_train_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_json(&tiny_config("batchwise")).unwrap();
    cfg.precision = batchwise_dropout::tensor::Precision::F64;
    let metrics = cli::cmd_train(&cfg, &opts(tmp.path()), false).unwrap();
    let err = cli::cmd_eval(&tmp.path().join(cli::CHECKPOINT_FILE), &cfg, &opts(tmp.path())).unwrap();
    assert_eq!(err, metrics.last().unwrap().test_error);
}

#[test]
fn corrupted_checkpoint_is_an_integrity_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), "run.json", &tiny_config("none"));
    let out = tmp.path().join("out");
    assert!(bwd(&["train", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.success());
    let ckpt = out.join(cli::CHECKPOINT_FILE);
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&ckpt, bytes).unwrap();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let err = cli::cmd_eval(&ckpt, &cfg, &opts(tmp.path())).unwrap_err();
    assert!(matches!(err, batchwise_dropout::Error::Integrity(_)), "{err}");
    let o = bwd(&["eval", "--config", cfg_path.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn exit_codes_separate_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), "bad.json", &tiny_config("batchwise").replace("\"epochs\": 4", "\"epochs\": 0"));
    let o = bwd(&["train", "--config", cfg_path.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = bwd(&["train", "--config", tmp.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn untrained_network_is_at_chance() {
    let spec = ArtificialSpec { classes: 10, dim: 30, walk_len: 20, flip: 0.3, train_per_class: 1, test_per_class: 300, seed: 8, exact_flips: false };
    let (_, test) = gen_artificial(&spec).unwrap();
    for seed in 0..3 {
        let net = FcNet::<f32>::new(NetSpec::new(vec![30, 40, 10], vec![0.0, 0.5]).unwrap(), seed).unwrap();
        let err = evaluate(&net, &test).unwrap();
        let sigma = 100.0 * (0.9 * 0.1 / test.len() as f64).sqrt();
        assert!((err - 90.0).abs() <= 3.0 * sigma, "seed {seed}: error {err}% (sigma {sigma})");
    }
}

#[test]
fn gen_data_writes_loadable_idx_files() {
    let tmp = tempfile::tempdir().unwrap();
    let spec_path = write_config(tmp.path(), "spec.json", &serde_json::to_string(&tiny_spec()).unwrap());
    let out = tmp.path().join("data");
    let o = bwd(&["gen-data", "--config", spec_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (train, test) = gen_artificial(&tiny_spec()).unwrap();
    let loaded = load_idx(out.join("train-images-idx3-ubyte"), out.join("train-labels-idx1-ubyte")).unwrap();
    assert_eq!(loaded.samples, train.samples);
    assert_eq!(loaded.labels, train.labels);
    let loaded = load_idx(out.join("t10k-images-idx3-ubyte"), out.join("t10k-labels-idx1-ubyte")).unwrap();
    assert_eq!(loaded.labels, test.labels);

    // The exported files drive training through the idx source.
    let mut cfg = RunConfig::from_json(&tiny_config("batchwise")).unwrap();
    let idx = DataSource::Idx {
        train_images: out.join("train-images-idx3-ubyte"),
        train_labels: out.join("train-labels-idx1-ubyte"),
        test_images: out.join("t10k-images-idx3-ubyte"),
        test_labels: out.join("t10k-labels-idx1-ubyte"),
    };
    let from_idx = {
        cfg.data = idx;
        cli::cmd_train(&cfg, &opts(&tmp.path().join("idx")), false).unwrap()
    };
    let direct = cli::cmd_train(&RunConfig::from_json(&tiny_config("batchwise")).unwrap(), &opts(&tmp.path().join("direct")), false).unwrap();
    let strip = |m: cli::RunMetrics| m.epochs.into_iter().map(|r| cli::EpochRecord { wall_s: 0.0, ..r }).collect::<Vec<_>>();
    assert_eq!(strip(from_idx), strip(direct));
}

#[test]
fn bench_writes_three_rows_per_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let text = r#"{
  "grid": [
    { "label": "a", "widths": [30, 20, 5], "drop": [0.0, 0.5] },
    { "label": "b", "widths": [30, 40, 40, 5], "drop": [0.2, 0.5, 0.5] },
    { "label": "c", "widths": [30, 60, 5], "drop": [0.5, 0.5] }
  ],
  "timing": { "batch": 10, "trials": 3, "warmup": 1, "batches": 2 }
}"#;
    let cfg_path = write_config(tmp.path(), "bench.json", text);
    let o = bwd(&["bench", "--config", cfg_path.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "--deterministic"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(tmp.path().join("bench.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 9);
    for r in &rows {
        let mults: f64 = r[col("mults_per_batch")].parse().unwrap();
        let dense: f64 = r[col("dense_mults_per_batch")].parse().unwrap();
        let ratio: f64 = r[col("mult_ratio")].parse().unwrap();
        assert_eq!(ratio, mults / dense);
        let mean: f64 = r[col("mean_batch_s")].parse().unwrap();
        let epoch: f64 = r[col("mean_epoch_s")].parse().unwrap();
        assert!(mean.is_finite() && mean > 0.0 && epoch.is_finite());
        if &r[col("path")] == "none" {
            assert_eq!(ratio, 1.0);
        }
    }
}

#[test]
fn pattern_experiment_with_one_period() {
    let tmp = tempfile::tempdir().unwrap();
    let mut base = RunConfig::from_json(&tiny_config("batchwise")).unwrap();
    base.epochs = 2;
    let cfg = PatternsConfig { base, periods: vec![4], seeds: vec![1], baseline: true, unrestricted: false };
    let rows = cli::cmd_experiment_patterns(&cfg, &opts(tmp.path())).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].kind, "baseline");
    assert_eq!(rows[1].period, Some(4));
    let text = fs::read_to_string(tmp.path().join("patterns.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);

    let mut no_batchwise = cfg.clone();
    no_batchwise.base.train.path = RunPath::Independent;
    assert!(cli::cmd_experiment_patterns(&no_batchwise, &opts(tmp.path())).is_err());
    let mut conv = cfg.clone();
    conv.base.model = ModelSpec::Conv(batchwise_dropout::netconv::ConvNetSpec::parse("4C3-4N", 1, 5).unwrap());
    assert!(cli::cmd_experiment_patterns(&conv, &opts(tmp.path())).is_err());
}
