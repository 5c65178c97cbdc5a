//! Run configuration and the commands behind the `bwd` binary.
//!
//! Every command is deterministic given its config and seed: metrics files
//! contain no wall-clock values (those go to `timing.csv`), and floats are
//! written in shortest round-trip form.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::{time_workloads, TimingOptions, TimingReport, Workload};
use crate::checkpoint::{stored_precision, Checkpoint, CheckpointMeta, ModelSpec};
use crate::data::{gen_artificial, load_cifar10, load_idx, load_mnist_split, write_idx, ArtificialSpec, Dataset};
use crate::error::{Error, Result};
use crate::model::{Network, Path as RunPath};
use crate::netconv::ConvNet;
use crate::netfc::{FcNet, NetSpec};
use crate::tensor::{Element, Precision, Summation};
use crate::train::{Trainer, TrainSettings};

pub const METRICS_SCHEMA: &str = "bwd-metrics-1";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bwd";

/// Where training and test data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Artificial { spec: ArtificialSpec },
    /// Directory holding the four standard MNIST files.
    Mnist { dir: PathBuf },
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
    Cifar { train: Vec<PathBuf>, test: Vec<PathBuf> },
}

impl DataSource {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Artificial { spec } => gen_artificial(spec),
            DataSource::Mnist { dir } => Ok((load_mnist_split(dir, "train")?, load_mnist_split(dir, "t10k")?)),
            DataSource::Idx { train_images, train_labels, test_images, test_labels } => {
                Ok((load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?))
            }
            DataSource::Cifar { train, test } => Ok((load_cifar10(train)?, load_cifar10(test)?)),
        }
    }
}

fn default_precision() -> Precision {
    Precision::F32
}

fn default_checkpoint_every() -> usize {
    10
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub model: ModelSpec,
    pub train: TrainSettings,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default)]
    pub summation: Summation,
    /// Save a checkpoint every this many epochs (0: only at the end).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Use only the first `n` training samples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Also report the test-time error on the training set each epoch.
    #[serde(default = "default_true")]
    pub eval_train: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read_text(path.as_ref())?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let DataSource::Artificial { spec } = &self.data {
            spec.validate()?;
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.train.pattern_period.is_some() {
            if let ModelSpec::Conv(_) = self.model {
                return Err(Error::Config("pattern banks are only wired up for fully-connected models".into()));
            }
        }
        Ok(())
    }

    /// Training and test sets after the configured limits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (mut train, mut test) = self.data.load()?;
        if let Some(n) = self.train_limit {
            train = train.head(n);
        }
        if let Some(n) = self.test_limit {
            test = test.head(n);
        }
        Ok((train, test))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Options shared by every command.
#[derive(Debug, Clone, Default)]
pub struct CommonOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Force fixed-order summation and single-threaded evaluation.
    pub deterministic: bool,
    /// Evaluation threads; ignored in deterministic mode.
    pub threads: usize,
}

impl CommonOptions {
    fn threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads.max(1)
        }
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_error: Option<f64>,
    pub test_error: f64,
    pub mean_loss: f64,
    pub mults: u128,
    pub rate: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
}

impl RunMetrics {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

const METRICS_HEADER: [&str; 8] = ["schema", "epoch", "path", "train_error_pct", "test_error_pct", "mean_loss", "cumulative_mults", "rate"];

fn metrics_row(r: &EpochRecord, path: RunPath) -> [String; 8] {
    [
        METRICS_SCHEMA.to_string(),
        r.epoch.to_string(),
        path.to_string(),
        r.train_error.map_or(String::new(), |e| e.to_string()),
        r.test_error.to_string(),
        r.mean_loss.to_string(),
        r.mults.to_string(),
        r.rate.to_string(),
    ]
}

/// Reads a metrics CSV back.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<RunMetrics> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let bad = |what: &str| Error::Format { path: path.as_ref().into(), detail: format!("bad {what}") };
    let mut epochs = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.get(0) != Some(METRICS_SCHEMA) {
            return Err(bad("schema"));
        }
        let num = |i: usize| rec.get(i).ok_or_else(|| bad("row"));
        epochs.push(EpochRecord {
            epoch: num(1)?.parse().map_err(|_| bad("epoch"))?,
            train_error: match num(3)? {
                "" => None,
                v => Some(v.parse().map_err(|_| bad("train error"))?),
            },
            test_error: num(4)?.parse().map_err(|_| bad("test error"))?,
            mean_loss: num(5)?.parse().map_err(|_| bad("loss"))?,
            mults: num(6)?.parse().map_err(|_| bad("multiplication count"))?,
            rate: num(7)?.parse().map_err(|_| bad("rate"))?,
            wall_s: 0.0,
        });
    }
    Ok(RunMetrics { epochs })
}

struct RunFiles {
    metrics: csv::Writer<fs::File>,
    timing: csv::Writer<fs::File>,
}

impl RunFiles {
    /// Opens fresh logs, or on resume keeps the rows before `from_epoch`.
    fn open(dir: &Path, path: RunPath, from_epoch: usize) -> Result<Self> {
        let metrics_path = dir.join(METRICS_FILE);
        let timing_path = dir.join(TIMING_FILE);
        let kept_metrics = if from_epoch > 0 { read_metrics(&metrics_path)?.epochs } else { Vec::new() };
        let kept_timing: Vec<csv::StringRecord> = if from_epoch > 0 && timing_path.exists() {
            csv::Reader::from_path(&timing_path)?.records().collect::<std::result::Result<_, _>>()?
        } else {
            Vec::new()
        };
        let mut metrics = csv::Writer::from_path(&metrics_path)?;
        metrics.write_record(METRICS_HEADER)?;
        for r in kept_metrics.iter().filter(|r| r.epoch < from_epoch) {
            metrics.write_record(metrics_row(r, path))?;
        }
        let mut timing = csv::Writer::from_path(&timing_path)?;
        timing.write_record(["epoch", "wall_s"])?;
        for r in kept_timing.iter().filter(|r| r.get(0).and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < from_epoch)) {
            timing.write_record(r)?;
        }
        let mut files = RunFiles { metrics, timing };
        files.flush()?;
        Ok(files)
    }

    fn push(&mut self, r: &EpochRecord, path: RunPath) -> Result<()> {
        self.metrics.write_record(metrics_row(r, path))?;
        self.timing.write_record([r.epoch.to_string(), format!("{:.6}", r.wall_s)])?;
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| Error::io("writing metrics", e))?;
        self.timing.flush().map_err(|e| Error::io("writing timing", e))
    }
}

/// Everything `train` needs besides the network itself.
struct RunContext<'a> {
    cfg: &'a RunConfig,
    opts: &'a CommonOptions,
    out: &'a Path,
    resume: bool,
    quiet: bool,
}

fn checkpoint_for<T: Element, N: Network<T>>(trainer: &Trainer<T, N>, cfg: &RunConfig) -> Checkpoint<T> {
    Checkpoint {
        meta: CheckpointMeta {
            model: cfg.model.clone(),
            settings: trainer.settings().clone(),
            seed: trainer.seed(),
            precision: T::PRECISION,
            summation: cfg.summation,
            state: (&trainer.state()).into(),
        },
        layers: trainer.net().layers().to_vec(),
        optimizer: trainer.optimizer().clone(),
    }
}

fn run_epochs<T: Element, N: Network<T> + Sync>(
    mut trainer: Trainer<T, N>,
    ctx: &RunContext<'_>,
    data: &(Dataset, Dataset),
) -> Result<RunMetrics> {
    let cfg = ctx.cfg;
    trainer.set_eval_threads(ctx.opts.threads());
    let ckpt_path = ctx.out.join(CHECKPOINT_FILE);
    if ctx.resume && ckpt_path.exists() {
        let saved = Checkpoint::<T>::load(&ckpt_path)?;
        if saved.meta.model != cfg.model || saved.meta.settings != cfg.train || saved.meta.seed != trainer.seed() {
            return Err(Error::Config("checkpoint was written by a different configuration".into()));
        }
        trainer.net_mut().layers_mut().clone_from_slice(&saved.layers);
        trainer.restore(saved.optimizer, saved.meta.state.to_trainer_state()?)?;
    }
    let mut files = RunFiles::open(ctx.out, cfg.train.path, trainer.epoch())?;
    let mut metrics = RunMetrics::default();
    let (train, test) = data;
    while trainer.epoch() < cfg.epochs {
        let start = Instant::now();
        let rate = crate::optim::schedule_rate(&cfg.train.optimizer, trainer.epoch());
        let stats = trainer.train_epoch(train)?;
        let wall_s = start.elapsed().as_secs_f64();
        let record = EpochRecord {
            epoch: stats.epoch,
            train_error: if cfg.eval_train { Some(trainer.error_on(train)?) } else { None },
            test_error: trainer.error_on(test)?,
            mean_loss: stats.mean_loss,
            mults: stats.mults,
            rate,
            wall_s,
        };
        files.push(&record, cfg.train.path)?;
        if !ctx.quiet {
            eprintln!(
                "epoch {:>4}  loss {:.5}  train {}  test {:.2}%  ({:.1}s)",
                record.epoch,
                record.mean_loss,
                record.train_error.map_or("-".to_string(), |e| format!("{e:.2}%")),
                record.test_error,
                wall_s
            );
        }
        metrics.epochs.push(record);
        let done = trainer.epoch();
        if done == cfg.epochs || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            checkpoint_for(&trainer, cfg).save(&ckpt_path)?;
        }
    }
    Ok(metrics)
}

fn train_typed<T: Element>(ctx: &RunContext<'_>, seed: u64, data: &(Dataset, Dataset)) -> Result<RunMetrics> {
    let cfg = ctx.cfg;
    match &cfg.model {
        ModelSpec::Fc(spec) => {
            let mut net = FcNet::<T>::new(spec.clone(), seed)?;
            net.set_summation(cfg.summation);
            check_data(&net, data)?;
            run_epochs(Trainer::new(net, cfg.train.clone(), seed)?, ctx, data)
        }
        ModelSpec::Conv(spec) => {
            let mut net = ConvNet::<T>::new(spec.clone(), seed)?;
            net.set_summation(cfg.summation);
            let width = match cfg.train.augment.output_geometry(data.0.geometry)? {
                Some(g) => g.channels * g.side * g.side,
                None => data.0.dim(),
            };
            if width != net.input_width() {
                return Err(Error::Config(format!("{width}-wide samples for a {}-wide network input", net.input_width())));
            }
            run_epochs(Trainer::new(net, cfg.train.clone(), seed)?, ctx, data)
        }
    }
}

fn check_data<T: Element, N: Network<T>>(net: &N, data: &(Dataset, Dataset)) -> Result<()> {
    for d in [&data.0, &data.1] {
        if d.dim() != net.input_width() {
            return Err(Error::Config(format!("{}-wide samples for a {}-wide network input", d.dim(), net.input_width())));
        }
        if let Some(&label) = d.labels.iter().max() {
            if label >= net.classes() {
                return Err(Error::Config(format!("label {label} for a {}-way output", net.classes())));
            }
        }
    }
    Ok(())
}

/// Applies command-line overrides to a loaded config.
pub fn resolve_config(mut cfg: RunConfig, opts: &CommonOptions) -> RunConfig {
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if opts.deterministic {
        cfg.summation = Summation::Deterministic;
    }
    cfg
}

/// Trains per `cfg`, writing `config.json`, `metrics.csv`, `timing.csv` and
/// `checkpoint.bwd` into the output directory.
pub fn cmd_train(cfg: &RunConfig, opts: &CommonOptions, resume: bool) -> Result<RunMetrics> {
    let cfg = resolve_config(cfg.clone(), opts);
    cfg.validate()?;
    let out = opts.out_dir("runs/train");
    create_dir(&out)?;
    fs::write(out.join("config.json"), cfg.to_json()?).map_err(|e| Error::io("writing config.json", e))?;
    let data = cfg.load_data()?;
    train_loaded(&cfg, opts, &out, resume, false, &data)
}

fn train_loaded(
    cfg: &RunConfig,
    opts: &CommonOptions,
    out: &Path,
    resume: bool,
    quiet: bool,
    data: &(Dataset, Dataset),
) -> Result<RunMetrics> {
    let ctx = RunContext { cfg, opts, out, resume, quiet };
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(&ctx, cfg.seed, data),
        Precision::F64 => train_typed::<f64>(&ctx, cfg.seed, data),
    }
}

fn eval_typed<T: Element>(ckpt: &Path, data: &Dataset, threads: usize) -> Result<f64> {
    let saved = Checkpoint::<T>::load(ckpt)?;
    let crop = saved.meta.settings.augment.crop;
    let data = match crop {
        Some(size) => crate::data::center_crop(data, size)?,
        None => data.clone(),
    };
    match saved.meta.model {
        ModelSpec::Fc(spec) => {
            let mut net = FcNet::from_layers(spec, saved.layers)?;
            net.set_summation(saved.meta.summation);
            check_data(&net, &(data.clone(), data.clone()))?;
            crate::train::evaluate_with(&net, &data, threads)
        }
        ModelSpec::Conv(spec) => {
            let mut net = ConvNet::from_layers(spec, saved.layers)?;
            net.set_summation(saved.meta.summation);
            crate::train::evaluate_with(&net, &data, threads).map_err(|e| match e {
                Error::Shape { detail, .. } => Error::Config(detail),
                e => e,
            })
        }
    }
}

/// Test error (%) of a saved model on the test split of `cfg`'s data.
pub fn cmd_eval(checkpoint: &Path, cfg: &RunConfig, opts: &CommonOptions) -> Result<f64> {
    let (_, test) = cfg.load_data()?;
    match stored_precision(checkpoint)? {
        Precision::F32 => eval_typed::<f32>(checkpoint, &test, opts.threads()),
        Precision::F64 => eval_typed::<f64>(checkpoint, &test, opts.threads()),
    }
}

/// Writes an artificial dataset as IDX files (`train-*` and `t10k-*`).
pub fn cmd_gen_data(spec: &ArtificialSpec, opts: &CommonOptions) -> Result<PathBuf> {
    let mut spec = spec.clone();
    if let Some(seed) = opts.seed {
        spec.seed = seed;
    }
    let out = opts.out_dir("data/artificial");
    create_dir(&out)?;
    let (train, test) = gen_artificial(&spec)?;
    write_idx(&train, out.join("train-images-idx3-ubyte"), out.join("train-labels-idx1-ubyte"))?;
    write_idx(&test, out.join("t10k-images-idx3-ubyte"), out.join("t10k-labels-idx1-ubyte"))?;
    fs::write(out.join("spec.json"), serde_json::to_string_pretty(&spec)?).map_err(|e| Error::io("writing spec.json", e))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub label: String,
    pub widths: Vec<usize>,
    pub drop: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub grid: Vec<GridPoint>,
    #[serde(default)]
    pub timing: TimingOptions,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Also time each grid point's half-width no-dropout network.
    #[serde(default)]
    pub include_half: bool,
}

/// Times the three paths on every grid point; writes `bench.csv`.
pub fn cmd_bench(cfg: &BenchConfig, opts: &CommonOptions) -> Result<TimingReport> {
    let mut timing = cfg.timing;
    if let Some(seed) = opts.seed {
        timing.seed = seed;
    }
    if opts.deterministic {
        timing.summation = Summation::Deterministic;
    }
    let mut workloads = Vec::new();
    for point in &cfg.grid {
        let spec = NetSpec::new(point.widths.clone(), point.drop.clone())?;
        for path in RunPath::ALL {
            workloads.push(Workload { label: point.label.clone(), spec: spec.clone(), path });
        }
        if cfg.include_half {
            workloads.push(Workload { label: format!("{}-half", point.label), spec: spec.halved_hidden(), path: RunPath::None });
        }
    }
    let report = match cfg.precision {
        Precision::F32 => time_workloads::<f32>(&workloads, &timing)?,
        Precision::F64 => time_workloads::<f64>(&workloads, &timing)?,
    };
    let out = opts.out_dir("runs/bench");
    create_dir(&out)?;
    report.write_csv(out.join("bench.csv"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternsConfig {
    /// Batchwise run the restricted-pattern runs are derived from.
    pub base: RunConfig,
    pub periods: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Train the half-width no-dropout network as a reference.
    #[serde(default = "default_true")]
    pub baseline: bool,
    /// Also train with freshly sampled masks every minibatch.
    #[serde(default)]
    pub unrestricted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRow {
    /// `baseline`, `unrestricted` or `period`.
    pub kind: String,
    pub period: Option<usize>,
    pub seed: u64,
    pub train_error_pct: Option<f64>,
    pub test_error_pct: f64,
}

/// One run per (period, seed), plus the optional references; writes
/// `patterns.csv` and per-run logs under `runs/`.
pub fn cmd_experiment_patterns(cfg: &PatternsConfig, opts: &CommonOptions) -> Result<Vec<PatternRow>> {
    let base = resolve_config(cfg.base.clone(), opts);
    base.validate()?;
    let ModelSpec::Fc(spec) = &base.model else {
        return Err(Error::Config("the pattern experiment uses fully-connected models".into()));
    };
    if base.train.path != RunPath::Batchwise {
        return Err(Error::Config("the pattern experiment needs the batchwise path".into()));
    }
    if cfg.periods.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("periods and seeds must be non-empty".into()));
    }
    let out = opts.out_dir("runs/patterns");
    create_dir(&out)?;
    let data = base.load_data()?;

    let mut jobs: Vec<(String, Option<usize>, RunConfig)> = Vec::new();
    for &seed in &cfg.seeds {
        let with_seed = RunConfig { seed, ..base.clone() };
        if cfg.baseline {
            let mut c = with_seed.clone();
            c.model = ModelSpec::Fc(spec.halved_hidden());
            c.train.path = RunPath::None;
            c.train.pattern_period = None;
            jobs.push(("baseline".into(), None, c));
        }
        if cfg.unrestricted {
            let mut c = with_seed.clone();
            c.train.pattern_period = None;
            jobs.push(("unrestricted".into(), None, c));
        }
        for &period in &cfg.periods {
            let mut c = with_seed.clone();
            c.train.pattern_period = Some(period);
            jobs.push(("period".into(), Some(period), c));
        }
    }

    let mut rows = Vec::with_capacity(jobs.len());
    for (kind, period, c) in jobs {
        let name = match period {
            Some(p) => format!("period-{p}-seed-{}", c.seed),
            None => format!("{kind}-seed-{}", c.seed),
        };
        let dir = out.join("runs").join(name);
        create_dir(&dir)?;
        let metrics = train_loaded(&c, opts, &dir, false, true, &data)?;
        let last = metrics.last().expect("at least one epoch");
        rows.push(PatternRow { kind, period, seed: c.seed, train_error_pct: last.train_error, test_error_pct: last.test_error });
    }
    let mut w = csv::Writer::from_path(out.join("patterns.csv"))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("writing patterns.csv", e))?;
    Ok(rows)
}

/// Reads a JSON config of any command.
pub fn load_json<C: for<'de> Deserialize<'de>>(path: &Path) -> Result<C> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

/// Prints a line to stdout, ignoring broken pipes.
pub fn say(line: impl AsRef<str>) {
    let _ = writeln!(std::io::stdout(), "{}", line.as_ref());
}
