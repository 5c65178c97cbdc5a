//! Dropout masks: per-sample Bernoulli masks, batchwise masks with an exact
//! dropped count, and cyclic banks of pre-sampled mask tuples.

use std::io::{Read, Write};
use std::path::PathBuf;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, IndexSet, Matrix};

// ── Random streams ─────────────────────────────────────────────────

/// What a random stream is used for. Each purpose (and layer, where it
/// applies) gets its own ChaCha stream so draws in one never shift another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Mask { level: usize },
    Bank,
    Shuffle,
    Augment,
    Init { layer: usize },
    Walk { class: usize },
    Sample { class: usize },
    Bench,
}

impl Stream {
    pub fn id(self) -> u64 {
        let (purpose, index) = match self {
            Stream::Mask { level } => (1, level),
            Stream::Bank => (2, 0),
            Stream::Shuffle => (3, 0),
            Stream::Augment => (4, 0),
            Stream::Init { layer } => (5, layer),
            Stream::Walk { class } => (6, class),
            Stream::Sample { class } => (7, class),
            Stream::Bench => (8, 0),
        };
        (purpose << 32) | index as u64
    }
}

/// ChaCha8 generator identified by `(seed, stream)`.
///
/// The keystream is fully specified, so a given `(seed, stream, call
/// sequence)` yields the same values on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of an [`Rng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, stream, inner }
    }

    pub fn for_stream(seed: u64, stream: Stream) -> Self {
        Self::new(seed, stream.id())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn state(&self) -> RngState {
        RngState { seed: self.seed, stream: self.stream, word_pos: self.inner.get_word_pos() }
    }

    pub fn restore(state: RngState) -> Self {
        let mut rng = Self::new(state.seed, state.stream);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    /// Uniform integer in `[lo, hi)`, sampled through `u64` so the result
    /// does not depend on the platform's pointer width.
    pub fn below(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo as u64..hi as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen_bool(p)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

// ── Masks ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// One row per sample.
    Independent,
    /// One row shared by the whole minibatch.
    Batchwise,
}

/// How the number of dropped units is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Every unit dropped independently with probability `p`.
    Bernoulli,
    /// Exactly `round(n·p)` units dropped per row, uniformly over subsets.
    ExactCount,
}

/// Binary keep (`true`) / drop (`false`) array of shape `rows × cols`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMask {
    mode: MaskMode,
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
    keep: Option<IndexSet>,
}

/// Number of units an exact-count sampler drops: `n·p` rounded half to even.
pub fn dropped_count(n: usize, p: f64) -> usize {
    ((n as f64) * p).round_ties_even() as usize
}

fn check_probability(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::DropProbability(p))
    }
}

impl DropoutMask {
    pub fn from_bits(mode: MaskMode, rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::shape("DropoutMask::from_bits", format!("{} bits for {rows}x{cols}", bits.len())));
        }
        if mode == MaskMode::Batchwise && rows != 1 {
            return Err(Error::shape("DropoutMask::from_bits", format!("batchwise mask with {rows} rows")));
        }
        let keep = (mode == MaskMode::Batchwise).then(|| IndexSet::from_keep(&bits));
        Ok(DropoutMask { mode, rows, cols, bits, keep })
    }

    /// Mask that keeps everything.
    pub fn keep_all(mode: MaskMode, rows: usize, cols: usize) -> Self {
        Self::from_bits(mode, rows, cols, vec![true; rows * cols]).expect("consistent shape")
    }

    pub fn from_index_set(keep: &IndexSet) -> Self {
        let mut bits = vec![false; keep.parent()];
        for i in keep.iter() {
            bits[i] = true;
        }
        DropoutMask { mode: MaskMode::Batchwise, rows: 1, cols: keep.parent(), bits, keep: Some(keep.clone()) }
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    /// Kept units of a batchwise mask.
    pub fn keep_set(&self) -> Option<&IndexSet> {
        self.keep.as_ref()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Mask as a `rows × cols` matrix of zeros and ones.
    pub fn to_matrix<T: Element>(&self) -> Matrix<T> {
        Matrix::from_fn(self.rows, self.cols, |i, j| if self.get(i, j) { T::ONE } else { T::ZERO })
    }

    /// `x ⊙ mask`, broadcasting a one-row mask over all rows of `x`.
    pub fn apply<T: Element>(&self, x: &mut Matrix<T>) -> Result<()> {
        if self.cols != x.cols() || (self.rows != x.rows() && self.rows != 1) {
            return Err(Error::shape(
                "DropoutMask::apply",
                format!("mask {}x{} on {:?}", self.rows, self.cols, x.shape()),
            ));
        }
        for i in 0..x.rows() {
            let m = if self.rows == 1 { self.row(0) } else { self.row(i) };
            for (v, &k) in x.row_mut(i).iter_mut().zip(m) {
                if !k {
                    *v = T::ZERO;
                }
            }
        }
        Ok(())
    }

    // Dump layout: b"BDMK", version u8, mode u8, rows u32 LE, cols u32 LE,
    // then row-major bits packed LSB-first.
    const MAGIC: &'static [u8; 4] = b"BDMK";
    const VERSION: u8 = 1;

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(Self::MAGIC)?;
        out.write_all(&[Self::VERSION, matches!(self.mode, MaskMode::Batchwise) as u8])?;
        out.write_all(&(self.rows as u32).to_le_bytes())?;
        out.write_all(&(self.cols as u32).to_le_bytes())?;
        let mut packed = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            packed[i / 8] |= 1 << (i % 8);
        }
        out.write_all(&packed)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec");
        out
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let bad = |detail: &str| Error::Format { path: PathBuf::from("<mask>"), detail: detail.to_string() };
        let mut header = [0u8; 14];
        input.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        if &header[..4] != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        if header[4] != Self::VERSION {
            return Err(bad("unsupported version"));
        }
        let mode = match header[5] {
            0 => MaskMode::Independent,
            1 => MaskMode::Batchwise,
            _ => return Err(bad("unknown mode")),
        };
        let rows = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| bad("shape overflow"))?;
        let mut packed = vec![0u8; n.div_ceil(8)];
        input.read_exact(&mut packed).map_err(|_| bad("truncated bits"))?;
        let bits = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        Self::from_bits(mode, rows, cols, bits)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }
}

/// Per-sample mask: each of the `b × n` bits is kept with probability `1 − p`.
pub fn sample_independent(b: usize, n: usize, p: f64, rng: &mut Rng) -> Result<DropoutMask> {
    check_probability(p)?;
    let bits = (0..b * n).map(|_| p == 0.0 || rng.bernoulli(1.0 - p)).collect();
    DropoutMask::from_bits(MaskMode::Independent, b, n, bits)
}

/// Per-sample mask where each row drops exactly `round(n·p)` units.
pub fn sample_independent_exact(b: usize, n: usize, p: f64, rng: &mut Rng) -> Result<DropoutMask> {
    check_probability(p)?;
    let mut bits = Vec::with_capacity(b * n);
    for _ in 0..b {
        bits.extend(exact_keep_bits(n, dropped_count(n, p), rng));
    }
    DropoutMask::from_bits(MaskMode::Independent, b, n, bits)
}

/// Draws `dropped` positions out of `n` with a partial Fisher–Yates shuffle.
fn exact_keep_bits(n: usize, dropped: usize, rng: &mut Rng) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..dropped {
        let j = rng.below(i, n);
        order.swap(i, j);
    }
    let mut bits = vec![true; n];
    for &i in &order[..dropped] {
        bits[i] = false;
    }
    bits
}

/// One shared row dropping exactly `round(n·p)` units, uniform over all
/// subsets of that size.
pub fn sample_batchwise_exact(n: usize, p: f64, rng: &mut Rng) -> Result<DropoutMask> {
    check_probability(p)?;
    DropoutMask::from_bits(MaskMode::Batchwise, 1, n, exact_keep_bits(n, dropped_count(n, p), rng))
}

/// One shared row of independent Bernoulli(1 − p) bits.
pub fn sample_batchwise_bernoulli(n: usize, p: f64, rng: &mut Rng) -> Result<DropoutMask> {
    check_probability(p)?;
    let bits = (0..n).map(|_| p == 0.0 || rng.bernoulli(1.0 - p)).collect();
    DropoutMask::from_bits(MaskMode::Batchwise, 1, n, bits)
}

pub fn sample_batchwise(n: usize, p: f64, sampling: Sampling, rng: &mut Rng) -> Result<DropoutMask> {
    match sampling {
        Sampling::ExactCount => sample_batchwise_exact(n, p, rng),
        Sampling::Bernoulli => sample_batchwise_bernoulli(n, p, rng),
    }
}

/// Copies a batchwise row `b` times, giving the equivalent per-sample mask.
pub fn replicate_rows(mask: &DropoutMask, b: usize) -> Result<DropoutMask> {
    if mask.mode != MaskMode::Batchwise {
        return Err(Error::shape("replicate_rows", "expected a batchwise mask"));
    }
    let mut bits = Vec::with_capacity(b * mask.cols);
    for _ in 0..b {
        bits.extend_from_slice(&mask.bits);
    }
    DropoutMask::from_bits(MaskMode::Independent, b, mask.cols, bits)
}

/// Expands a batchwise channel mask (`1×n×1×1`) to a per-element mask
/// over `b` samples of `n` channels with `plane` positions each.
pub fn broadcast_channels(mask: &DropoutMask, b: usize, plane: usize) -> Result<DropoutMask> {
    if mask.mode != MaskMode::Batchwise {
        return Err(Error::shape("broadcast_channels", "expected a batchwise mask"));
    }
    let mut row = Vec::with_capacity(mask.cols * plane);
    for &k in &mask.bits {
        row.extend(std::iter::repeat_n(k, plane));
    }
    let mut bits = Vec::with_capacity(b * row.len());
    for _ in 0..b {
        bits.extend_from_slice(&row);
    }
    DropoutMask::from_bits(MaskMode::Independent, b, mask.cols * plane, bits)
}

// ── Pattern bank ───────────────────────────────────────────────────

/// A fixed cycle of `period` batchwise mask tuples (one mask per level).
#[derive(Debug, Clone, PartialEq)]
pub struct PatternBank {
    tuples: Vec<Vec<DropoutMask>>,
    cursor: usize,
}

/// Pre-samples `period` exact-count mask tuples for levels of the given sizes.
pub fn make_pattern_bank(period: usize, layer_sizes: &[usize], drop_probs: &[f64], rng: &mut Rng) -> Result<PatternBank> {
    if period == 0 {
        return Err(Error::Config("pattern bank period must be at least 1".into()));
    }
    if layer_sizes.is_empty() {
        return Err(Error::Config("pattern bank needs at least one layer".into()));
    }
    if layer_sizes.len() != drop_probs.len() {
        return Err(Error::Config(format!(
            "{} layer sizes but {} drop probabilities",
            layer_sizes.len(),
            drop_probs.len()
        )));
    }
    let mut tuples = Vec::with_capacity(period);
    for _ in 0..period {
        let tuple = layer_sizes
            .iter()
            .zip(drop_probs)
            .map(|(&n, &p)| sample_batchwise_exact(n, p, rng))
            .collect::<Result<Vec<_>>>()?;
        tuples.push(tuple);
    }
    Ok(PatternBank { tuples, cursor: 0 })
}

impl PatternBank {
    pub fn period(&self) -> usize {
        self.tuples.len()
    }

    pub fn levels(&self) -> usize {
        self.tuples[0].len()
    }

    /// Tuple used at minibatch `t`.
    pub fn at(&self, t: usize) -> &[DropoutMask] {
        &self.tuples[t % self.tuples.len()]
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn set_cursor(&mut self, cursor: usize) {
        self.cursor = cursor;
    }

    /// Tuple for the next minibatch.
    pub fn next_tuple(&mut self) -> &[DropoutMask] {
        let t = self.cursor;
        self.cursor += 1;
        &self.tuples[t % self.tuples.len()]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"BDPB");
        out.push(1);
        out.extend_from_slice(&(self.period() as u32).to_le_bytes());
        out.extend_from_slice(&(self.levels() as u32).to_le_bytes());
        for tuple in &self.tuples {
            for mask in tuple {
                mask.write_to(&mut out).expect("writing to a Vec");
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format { path: PathBuf::from("<pattern bank>"), detail: detail.to_string() };
        if bytes.len() < 13 || &bytes[..4] != b"BDPB" || bytes[4] != 1 {
            return Err(bad("bad header"));
        }
        let period = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let levels = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        if period == 0 || levels == 0 {
            return Err(bad("empty bank"));
        }
        let mut input = &bytes[13..];
        let mut tuples = Vec::with_capacity(period);
        for _ in 0..period {
            tuples.push((0..levels).map(|_| DropoutMask::read_from(&mut input)).collect::<Result<Vec<_>>>()?);
        }
        Ok(PatternBank { tuples, cursor: 0 })
    }
}
