//! Minibatch training loop shared by every [`Network`].

use std::marker::PhantomData;

use serde::{Deserialize, Serialize};

use crate::data::{center_crop, minibatches, Augment, Dataset};
use crate::dropout::{
    make_pattern_bank, sample_batchwise, sample_independent, sample_independent_exact, DropoutMask, PatternBank, Rng,
    RngState, Sampling, Stream,
};
use crate::error::{Error, Result};
use crate::model::{error_percent, Network, Path};
use crate::optim::{update_all, OptimizerConfig, OptimizerState};
use crate::tensor::{Element, Matrix};

/// Rows per evaluation chunk.
const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub path: Path,
    /// Mask sampling; unset means Bernoulli on the independent path and
    /// exact-count on the batchwise path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<Sampling>,
    pub optimizer: OptimizerConfig,
    pub batch: usize,
    #[serde(default)]
    pub augment: Augment,
    /// Cycle through this many pre-sampled mask tuples (batchwise path only).
    #[serde(default)]
    pub pattern_period: Option<usize>,
}

impl TrainSettings {
    pub fn new(path: Path, optimizer: OptimizerConfig, batch: usize) -> Self {
        TrainSettings { path, sampling: None, optimizer, batch, augment: Augment::default(), pattern_period: None }
    }

    pub fn sampling(&self) -> Sampling {
        self.sampling.unwrap_or(match self.path {
            Path::Independent => Sampling::Bernoulli,
            _ => Sampling::ExactCount,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("minibatch size must be positive".into()));
        }
        if self.pattern_period.is_some() && self.path != Path::Batchwise {
            return Err(Error::Config("a pattern period needs the batchwise path".into()));
        }
        if self.pattern_period == Some(0) {
            return Err(Error::Config("pattern period must be at least 1".into()));
        }
        Ok(())
    }
}

/// Random-stream positions and counters needed to resume training exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainerState {
    pub epoch: usize,
    pub mults: u128,
    pub mask_rngs: Vec<RngState>,
    pub shuffle: RngState,
    pub bank_cursor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    /// Multiplications spent so far, over all epochs.
    pub mults: u128,
}

pub struct Trainer<T: Element, N: Network<T>> {
    net: N,
    optimizer: OptimizerState<T>,
    settings: TrainSettings,
    seed: u64,
    mask_rngs: Vec<Rng>,
    shuffle: Rng,
    bank: Option<PatternBank>,
    epoch: usize,
    mults: u128,
    eval_threads: usize,
    _element: PhantomData<T>,
}

impl<T: Element, N: Network<T>> Trainer<T, N> {
    pub fn new(net: N, settings: TrainSettings, seed: u64) -> Result<Self> {
        settings.validate()?;
        let shapes = net.level_shapes();
        let bank = match settings.pattern_period {
            Some(period) => {
                let units: Vec<usize> = shapes.iter().map(|s| s.units).collect();
                Some(make_pattern_bank(period, &units, net.drop_probs(), &mut Rng::for_stream(seed, Stream::Bank))?)
            }
            None => None,
        };
        let optimizer = OptimizerState::new(net.layers());
        Ok(Trainer {
            mask_rngs: (0..shapes.len()).map(|level| Rng::for_stream(seed, Stream::Mask { level })).collect(),
            shuffle: Rng::for_stream(seed, Stream::Shuffle),
            net,
            optimizer,
            settings,
            seed,
            bank,
            epoch: 0,
            mults: 0,
            eval_threads: 1,
            _element: PhantomData,
        })
    }

    pub fn net(&self) -> &N {
        &self.net
    }

    pub(crate) fn net_mut(&mut self) -> &mut N {
        &mut self.net
    }

    pub fn into_net(self) -> N {
        self.net
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn mults(&self) -> u128 {
        self.mults
    }

    pub fn optimizer(&self) -> &OptimizerState<T> {
        &self.optimizer
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            epoch: self.epoch,
            mults: self.mults,
            mask_rngs: self.mask_rngs.iter().map(Rng::state).collect(),
            shuffle: self.shuffle.state(),
            bank_cursor: self.bank.as_ref().map_or(0, PatternBank::cursor),
        }
    }

    /// Puts back parameters, momentum and random-stream positions saved earlier.
    pub fn restore(&mut self, optimizer: OptimizerState<T>, state: TrainerState) -> Result<()> {
        if state.mask_rngs.len() != self.mask_rngs.len() || optimizer.velocity.len() != self.net.layers().len() {
            return Err(Error::Integrity("saved trainer state does not match the network".into()));
        }
        self.optimizer = optimizer;
        self.mask_rngs = state.mask_rngs.into_iter().map(Rng::restore).collect();
        self.shuffle = Rng::restore(state.shuffle);
        if let Some(bank) = self.bank.as_mut() {
            bank.set_cursor(state.bank_cursor);
        }
        self.epoch = state.epoch;
        self.mults = state.mults;
        Ok(())
    }

    /// Masks for one minibatch of `b` samples on the configured path.
    pub fn sample_masks(&mut self, b: usize) -> Result<Vec<Option<DropoutMask>>> {
        let shapes = self.net.level_shapes();
        let probs = self.net.drop_probs().to_vec();
        match self.settings.path {
            Path::None => Ok(Vec::new()),
            Path::Independent => shapes
                .iter()
                .zip(&probs)
                .zip(self.mask_rngs.iter_mut())
                .map(|((s, &p), rng)| {
                    if p == 0.0 {
                        return Ok(None);
                    }
                    let width = s.units * s.plane;
                    match self.settings.sampling() {
                        Sampling::Bernoulli => sample_independent(b, width, p, rng).map(Some),
                        Sampling::ExactCount => sample_independent_exact(b, width, p, rng).map(Some),
                    }
                })
                .collect(),
            Path::Batchwise => {
                if let Some(bank) = self.bank.as_mut() {
                    let tuple = bank.next_tuple();
                    return Ok(tuple.iter().zip(&probs).map(|(m, &p)| (p > 0.0).then(|| m.clone())).collect());
                }
                shapes
                    .iter()
                    .zip(&probs)
                    .zip(self.mask_rngs.iter_mut())
                    .map(|((s, &p), rng)| {
                        if p == 0.0 {
                            Ok(None)
                        } else {
                            sample_batchwise(s.units, p, self.settings.sampling(), rng).map(Some)
                        }
                    })
                    .collect()
            }
        }
    }

    /// One forward/backward/update step; returns the minibatch loss.
    pub fn step(&mut self, x: &Matrix<T>, labels: &[usize]) -> Result<f64> {
        let masks = self.sample_masks(x.rows())?;
        self.step_with_masks(x, labels, &masks)
    }

    pub fn step_with_masks(&mut self, x: &Matrix<T>, labels: &[usize], masks: &[Option<DropoutMask>]) -> Result<f64> {
        let path = self.settings.path;
        let trace = self.net.forward_train(x, labels, masks, path)?;
        let loss = N::trace_loss(&trace);
        let grads = self.net.backward(&trace, labels)?;
        drop(trace);
        update_all(self.net.layers_mut(), &mut self.optimizer, &grads, &self.settings.optimizer, self.epoch)?;
        self.mults += self.net.mult_count(x.rows(), path, masks);
        Ok(loss)
    }

    /// Runs one epoch over `data`. A non-finite loss stops training.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        let mut shuffle = self.shuffle.clone();
        let batches: Vec<_> = minibatches(data, self.settings.batch, &mut shuffle, self.settings.augment)?.collect();
        self.shuffle = shuffle;
        let mut total = 0.0;
        for (i, (x, labels)) in batches.iter().enumerate() {
            let loss = match self.step(&x.cast::<T>(), labels) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch: self.epoch, batch: i }),
                Err(e) => return Err(e),
            };
            total += loss;
        }
        let stats = EpochStats { epoch: self.epoch, mean_loss: total / batches.len() as f64, batches: batches.len(), mults: self.mults };
        self.epoch += 1;
        Ok(stats)
    }

    /// Test-time error of the current network, with center crops when the
    /// training augmentation crops.
    pub fn error_on(&self, data: &Dataset) -> Result<f64>
    where
        N: Sync,
    {
        match self.settings.augment.crop {
            Some(size) => evaluate_with(&self.net, &center_crop(data, size)?, self.eval_threads),
            None => evaluate_with(&self.net, data, self.eval_threads),
        }
    }

    /// Worker threads used by [`Trainer::error_on`].
    pub fn set_eval_threads(&mut self, threads: usize) {
        self.eval_threads = threads.max(1);
    }
}

/// Thread count for evaluation from `BWD_THREADS` (default 1).
pub fn env_threads() -> usize {
    std::env::var("BWD_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Class probabilities of the full network, computed in chunks.
pub fn predict<T: Element, N: Network<T> + Sync>(net: &N, data: &Dataset) -> Result<Matrix<T>> {
    predict_with(net, data, 1)
}

/// Like [`predict`], spreading chunks over `threads` workers. Rows are
/// independent, so the result does not depend on the thread count.
pub fn predict_with<T: Element, N: Network<T> + Sync>(net: &N, data: &Dataset, threads: usize) -> Result<Matrix<T>> {
    if data.dim() != net.input_width() {
        return Err(Error::shape("evaluate", format!("{}-wide samples for a {}-wide network input", data.dim(), net.input_width())));
    }
    let classes = net.classes();
    let mut out = Matrix::zeros(data.len(), classes);
    let chunks: Vec<(usize, &mut [T])> = out
        .as_mut_slice()
        .chunks_mut(EVAL_CHUNK * classes)
        .enumerate()
        .map(|(i, c)| (i * EVAL_CHUNK, c))
        .collect();
    let run = |start: usize, dst: &mut [T]| -> Result<()> {
        let n = dst.len() / classes;
        let probs = net.forward_eval(&data.samples.row_slice(start, n).cast::<T>())?;
        dst.copy_from_slice(probs.as_slice());
        Ok(())
    };
    let threads = threads.max(1).min(chunks.len().max(1));
    if threads == 1 {
        for (start, dst) in chunks {
            run(start, dst)?;
        }
    } else {
        let mut buckets: Vec<Vec<(usize, &mut [T])>> = (0..threads).map(|_| Vec::new()).collect();
        for (i, chunk) in chunks.into_iter().enumerate() {
            buckets[i % threads].push(chunk);
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = buckets
                .into_iter()
                .map(|bucket| scope.spawn(|| bucket.into_iter().try_for_each(|(start, dst)| run(start, dst))))
                .collect();
            handles.into_iter().try_for_each(|h| h.join().expect("evaluation worker panicked"))
        })?;
    }
    Ok(out)
}

/// Percentage of misclassified samples.
pub fn evaluate<T: Element, N: Network<T> + Sync>(net: &N, data: &Dataset) -> Result<f64> {
    evaluate_with(net, data, 1)
}

pub fn evaluate_with<T: Element, N: Network<T> + Sync>(net: &N, data: &Dataset, threads: usize) -> Result<f64> {
    Ok(error_percent(&predict_with(net, data, threads)?, &data.labels))
}
