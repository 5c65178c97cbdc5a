//! Multiplication-count cost model and a wall-clock harness comparing the
//! three training paths.

use std::fmt::Write as _;
use std::path::Path as FsPath;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dropout::{dropped_count, DropoutMask, Rng, Stream};
use crate::error::{Error, Result};
use crate::model::Path;
use crate::netfc::{FcNet, NetSpec};
use crate::optim::OptimizerConfig;
use crate::tensor::{Element, Matrix, Summation};
use crate::train::{TrainSettings, Trainer};

/// Scalar multiplications of one weight layer's three products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerCost {
    pub forward: u128,
    pub weight_grad: u128,
    pub backward: u128,
}

impl LayerCost {
    /// Cost of a layer computed as `rows × inner` times `inner × cols`.
    pub fn gemm(rows: usize, inner: usize, cols: usize) -> Self {
        let n = rows as u128 * inner as u128 * cols as u128;
        LayerCost { forward: n, weight_grad: n, backward: n }
    }

    pub fn total(&self) -> u128 {
        self.forward + self.weight_grad + self.backward
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CostModel {
    pub layers: Vec<LayerCost>,
}

impl CostModel {
    pub fn total(&self) -> u128 {
        self.layers.iter().map(LayerCost::total).sum()
    }

    pub fn forward_total(&self) -> u128 {
        self.layers.iter().map(|l| l.forward).sum()
    }
}

/// Where the kept-unit counts of a batchwise pass come from.
#[derive(Debug, Clone, Copy)]
pub enum KeptSource<'a> {
    /// `m_k = n_k − round(n_k·p_k)`, the count every exact-count mask keeps.
    Expected(&'a [f64]),
    /// Popcounts of concrete masks (`None` keeps the whole level).
    Masks(&'a [Option<DropoutMask>]),
}

/// Units taking part in each level's products. The output level is never
/// dropped; only the batchwise path shrinks anything.
pub fn kept_counts_from(widths: &[usize], path: Path, source: KeptSource<'_>) -> Vec<usize> {
    let mut kept = widths.to_vec();
    if path != Path::Batchwise {
        return kept;
    }
    let last = widths.len() - 1;
    for (k, m) in kept.iter_mut().enumerate().take(last) {
        *m = match source {
            KeptSource::Expected(p) => widths[k] - dropped_count(widths[k], p.get(k).copied().unwrap_or(0.0)),
            KeptSource::Masks(masks) => match masks.get(k).and_then(Option::as_ref) {
                Some(mask) => mask.popcount(),
                None => widths[k],
            },
        };
    }
    kept
}

pub(crate) fn kept_counts(widths: &[usize], path: Path, masks: &[Option<DropoutMask>]) -> Vec<usize> {
    kept_counts_from(widths, path, KeptSource::Masks(masks))
}

/// `Σ_k 3·b·m_k·m_{k+1}` split per layer and per product.
pub fn count_from_kept(b: usize, kept: &[usize]) -> CostModel {
    CostModel { layers: kept.windows(2).map(|w| LayerCost::gemm(b, w[0], w[1])).collect() }
}

/// Multiplication count of one forward+backward pass of a fully-connected net.
pub fn mult_count(widths: &[usize], b: usize, path: Path, source: KeptSource<'_>) -> CostModel {
    count_from_kept(b, &kept_counts_from(widths, path, source))
}

/// One timed configuration: a network trained on one path.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub label: String,
    pub spec: NetSpec,
    pub path: Path,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingOptions {
    pub batch: usize,
    /// Timed repetitions; each covers `batches` minibatch steps.
    pub trials: usize,
    /// Untimed repetitions run first.
    pub warmup: usize,
    pub batches: usize,
    #[serde(default)]
    pub summation: Summation,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TimingOptions {
    fn default() -> Self {
        TimingOptions { batch: 100, trials: 5, warmup: 1, batches: 20, summation: Summation::Deterministic, seed: 0 }
    }
}

/// Timings of one workload. Times are seconds per minibatch step, covering
/// mask sampling, gathers, products, scatters and the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathTiming {
    pub label: String,
    pub path: Path,
    pub widths: String,
    pub batch: usize,
    pub trials: usize,
    pub batches_per_trial: usize,
    pub mean_batch_s: f64,
    pub min_batch_s: f64,
    pub std_batch_s: f64,
    pub mean_epoch_s: f64,
    pub mults_per_batch: u128,
    pub dense_mults_per_batch: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub environment: String,
    pub rows: Vec<PathTiming>,
}

/// Short description of the machine and mode the timings were taken in.
pub fn environment(summation: Summation) -> String {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mode = match summation {
        Summation::Deterministic => "deterministic",
        Summation::Blocked => "blocked",
    };
    format!("{}-{} cores={cores} mode={mode} threads=1", std::env::consts::OS, std::env::consts::ARCH)
}

impl TimingReport {
    pub fn row(&self, label: &str, path: Path) -> Option<&PathTiming> {
        self.rows.iter().find(|r| r.label == label && r.path == path)
    }

    /// `1 − time(a) / time(b)` from mean epoch times.
    pub fn saving(&self, a: (&str, Path), b: (&str, Path)) -> Option<f64> {
        Some(1.0 - self.row(a.0, a.1)?.mean_epoch_s / self.row(b.0, b.1)?.mean_epoch_s)
    }

    pub fn write_csv(&self, path: impl AsRef<FsPath>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record([
            "label", "path", "widths", "batch", "trials", "batches_per_trial", "mean_batch_s", "min_batch_s",
            "std_batch_s", "mean_epoch_s", "mults_per_batch", "dense_mults_per_batch", "mult_ratio", "environment",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                r.path.to_string(),
                r.widths.clone(),
                r.batch.to_string(),
                r.trials.to_string(),
                r.batches_per_trial.to_string(),
                format!("{:e}", r.mean_batch_s),
                format!("{:e}", r.min_batch_s),
                format!("{:e}", r.std_batch_s),
                format!("{:e}", r.mean_epoch_s),
                r.mults_per_batch.to_string(),
                r.dense_mults_per_batch.to_string(),
                format!("{}", r.mults_per_batch as f64 / r.dense_mults_per_batch as f64),
                self.environment.clone(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("writing timing CSV", e))?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut out = format!("{}\n", self.environment);
        let _ = writeln!(out, "{:<14} {:<12} {:>12} {:>12} {:>12} {:>10}", "label", "path", "ms/batch", "min ms", "std ms", "mults %");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:<12} {:>12.3} {:>12.3} {:>12.3} {:>10.1}",
                r.label,
                r.path.name(),
                r.mean_batch_s * 1e3,
                r.min_batch_s * 1e3,
                r.std_batch_s * 1e3,
                100.0 * r.mults_per_batch as f64 / r.dense_mults_per_batch as f64
            );
        }
        out
    }
}

/// Times several workloads on the same random data. Trials are interleaved
/// across workloads in a fixed order so slow drifts hit all of them alike.
pub fn time_workloads<T: Element>(workloads: &[Workload], opts: &TimingOptions) -> Result<TimingReport> {
    if opts.trials < 3 || opts.batches == 0 || opts.batch == 0 {
        return Err(Error::Config("timing needs at least 3 trials and a positive batch count".into()));
    }
    let mut trainers = Vec::with_capacity(workloads.len());
    let mut inputs = Vec::with_capacity(workloads.len());
    for w in workloads {
        let mut net = FcNet::<T>::new(w.spec.clone(), opts.seed)?;
        net.set_summation(opts.summation);
        let settings = TrainSettings::new(w.path, OptimizerConfig { rate: 0.01, ..OptimizerConfig::default() }, opts.batch);
        trainers.push(Trainer::new(net, settings, opts.seed)?);
        let mut rng = Rng::for_stream(opts.seed, Stream::Bench);
        let classes = *w.spec.widths.last().unwrap();
        let batches: Vec<(Matrix<T>, Vec<usize>)> = (0..opts.batches)
            .map(|_| {
                let x = Matrix::from_fn(opts.batch, w.spec.widths[0], |_, _| T::from_f64(rng.uniform()));
                let y = (0..opts.batch).map(|_| rng.below(0, classes)).collect();
                (x, y)
            })
            .collect();
        inputs.push(batches);
    }
    let mut samples = vec![Vec::with_capacity(opts.trials); workloads.len()];
    for trial in 0..opts.warmup + opts.trials {
        for (i, trainer) in trainers.iter_mut().enumerate() {
            let start = Instant::now();
            for (x, y) in &inputs[i] {
                trainer.step(x, y)?;
            }
            let per_batch = start.elapsed().as_secs_f64() / opts.batches as f64;
            if trial >= opts.warmup {
                samples[i].push(per_batch);
            }
        }
    }
    let rows = workloads
        .iter()
        .zip(&trainers)
        .zip(&samples)
        .map(|((w, t), s)| {
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let steps = ((opts.warmup + opts.trials) * opts.batches) as u128;
            PathTiming {
                label: w.label.clone(),
                path: w.path,
                widths: w.spec.widths.iter().map(usize::to_string).collect::<Vec<_>>().join("-"),
                batch: opts.batch,
                trials: opts.trials,
                batches_per_trial: opts.batches,
                mean_batch_s: mean,
                min_batch_s: s.iter().copied().fold(f64::INFINITY, f64::min),
                std_batch_s: var.sqrt(),
                mean_epoch_s: mean * opts.batches as f64,
                mults_per_batch: t.mults() / steps,
                dense_mults_per_batch: mult_count(&w.spec.widths, opts.batch, Path::None, KeptSource::Expected(&[])).total(),
            }
        })
        .collect();
    Ok(TimingReport { environment: environment(opts.summation), rows })
}

/// The three paths on one network.
pub fn time_paths<T: Element>(spec: &NetSpec, label: &str, opts: &TimingOptions) -> Result<TimingReport> {
    let workloads: Vec<Workload> = Path::ALL
        .iter()
        .map(|&path| Workload { label: label.to_string(), spec: spec.clone(), path })
        .collect();
    time_workloads::<T>(&workloads, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout::{sample_batchwise_exact, Rng};

    #[test]
    fn small_report_is_well_formed() {
        let spec = NetSpec::new(vec![8, 6, 3], vec![0.0, 0.5]).unwrap();
        let opts = TimingOptions { batch: 4, trials: 3, warmup: 0, batches: 2, ..TimingOptions::default() };
        let report = time_paths::<f32>(&spec, "tiny", &opts).unwrap();
        assert_eq!(report.rows.len(), 3);
        for r in &report.rows {
            assert!(r.mean_batch_s > 0.0 && r.min_batch_s <= r.mean_batch_s && r.std_batch_s.is_finite());
        }
        assert!(report.saving(("tiny", Path::Batchwise), ("tiny", Path::Independent)).unwrap().is_finite());
        assert_eq!(report.row("tiny", Path::Batchwise).unwrap().mults_per_batch, 3 * 4 * (8 * 3 + 3 * 3));
        let dir = tempfile::tempdir().unwrap();
        report.write_csv(dir.path().join("t.csv")).unwrap();
        assert!(time_paths::<f32>(&spec, "tiny", &TimingOptions { trials: 2, ..opts }).is_err());
    }

    #[test]
    fn single_layer_arithmetic() {
        let c = mult_count(&[784, 800], 100, Path::None, KeptSource::Expected(&[0.0]));
        assert_eq!(c.layers[0].forward, 62_720_000);
        assert_eq!(c.total(), 188_160_000);
    }

    #[test]
    fn half_dropout_on_both_levels_leaves_a_quarter() {
        let widths = [1000, 1000, 1000];
        let dense = mult_count(&widths, 100, Path::None, KeptSource::Expected(&[0.5, 0.5]));
        let bw = mult_count(&widths, 100, Path::Batchwise, KeptSource::Expected(&[0.5, 0.5]));
        assert_eq!(bw.layers[0].total() * 4, dense.layers[0].total());
        let ind = mult_count(&widths, 100, Path::Independent, KeptSource::Expected(&[0.5, 0.5]));
        assert_eq!(ind, dense);
    }

    #[test]
    fn full_masks_cost_the_dense_amount() {
        let masks = vec![Some(DropoutMask::keep_all(crate::dropout::MaskMode::Batchwise, 1, 30)), None];
        let a = mult_count(&[30, 20, 10], 7, Path::Batchwise, KeptSource::Masks(&masks));
        let b = mult_count(&[30, 20, 10], 7, Path::None, KeptSource::Masks(&[]));
        assert_eq!(a, b);
    }

    #[test]
    fn exact_count_masks_give_a_fixed_count() {
        let mut rng = Rng::new(4, 0);
        let widths = [2000, 2000, 10];
        let first = {
            let masks = vec![Some(sample_batchwise_exact(2000, 0.5, &mut rng).unwrap()), Some(sample_batchwise_exact(2000, 0.5, &mut rng).unwrap())];
            mult_count(&widths, 100, Path::Batchwise, KeptSource::Masks(&masks))
        };
        for _ in 0..20 {
            let masks = vec![Some(sample_batchwise_exact(2000, 0.5, &mut rng).unwrap()), Some(sample_batchwise_exact(2000, 0.5, &mut rng).unwrap())];
            assert_eq!(mult_count(&widths, 100, Path::Batchwise, KeptSource::Masks(&masks)), first);
        }
    }
}
