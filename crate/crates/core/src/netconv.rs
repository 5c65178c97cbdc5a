//! Convolutional networks: valid stride-1 cross-correlation, 2×2 max-pooling
//! and fully-connected layers, trained on the same three paths as
//! [`crate::netfc`].
//!
//! Activations are carried as `b × (c·s·s)` matrices, channel-major within a
//! sample, so the flatten step before a fully-connected layer is free and a
//! kept channel `i` owns columns `i·s²..(i+1)·s²`.
//!
//! On the batchwise path a level's mask selects whole channels. A conv layer
//! then runs with the filter bank restricted to (kept outputs) × (kept
//! inputs) × f × f, so dropped filters are never evaluated.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bench::{CostModel, LayerCost};
use crate::dropout::{sample_independent, DropoutMask, MaskMode, Rng};
use crate::error::{Error, Result};
use crate::model::{self, LevelShape, Network, Path};
use crate::params::{glorot_layer, Active, Layer, LayerGrad};
use crate::tensor::{
    gather_cols, gather_submatrix, gather_vec, matmul_at_with, matmul_bt_with, matmul_with, Element, IndexSet,
    Matrix, Summation, Tensor4,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDesc {
    /// `filters` output channels with `size × size` kernels.
    Conv { filters: usize, size: usize },
    /// Disjoint 2×2 max-pooling.
    MaxPool,
    /// Fully-connected layer with `units` outputs (flattens its input).
    Fc { units: usize },
}

/// Architecture such as `32C5-MP2-50%-64C5-MP2-50%-512N-50%-10N` over
/// `channels × side × side` inputs. `drop[k]` applies to the input of the
/// `k`-th weight layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConvSpecRepr", into = "ConvSpecRepr")]
pub struct ConvNetSpec {
    pub channels: usize,
    pub side: usize,
    pub layers: Vec<LayerDesc>,
    pub drop: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvSpecRepr {
    channels: usize,
    side: usize,
    arch: String,
}

impl TryFrom<ConvSpecRepr> for ConvNetSpec {
    type Error = Error;
    fn try_from(r: ConvSpecRepr) -> Result<Self> {
        ConvNetSpec::parse(&r.arch, r.channels, r.side)
    }
}

impl From<ConvNetSpec> for ConvSpecRepr {
    fn from(s: ConvNetSpec) -> Self {
        ConvSpecRepr { channels: s.channels, side: s.side, arch: s.to_string() }
    }
}

impl fmt::Display for ConvNetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        let mut k = 0;
        for layer in &self.layers {
            if !matches!(layer, LayerDesc::MaxPool) {
                let p = self.drop[k];
                if p > 0.0 {
                    parts.push(format!("{}%", p * 100.0));
                }
                k += 1;
            }
            parts.push(match layer {
                LayerDesc::Conv { filters, size } => format!("{filters}C{size}"),
                LayerDesc::MaxPool => "MP2".to_string(),
                LayerDesc::Fc { units } => format!("{units}N"),
            });
        }
        f.write_str(&parts.join("-"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Conv { layer: usize, c: usize, m: usize, f: usize, side: usize },
    Pool { side: usize },
    Fc { layer: usize, units: usize, plane: usize, out: usize },
}

impl ConvNetSpec {
    pub fn parse(arch: &str, channels: usize, side: usize) -> Result<Self> {
        let arch = arch.replace('−', "-");
        let mut layers = Vec::new();
        let mut drop = Vec::new();
        let mut pending = 0.0;
        for token in arch.split('-').map(str::trim).filter(|t| !t.is_empty()) {
            let bad = || Error::Config(format!("cannot parse layer {token:?}"));
            if let Some(pct) = token.strip_suffix('%') {
                pending = pct.parse::<f64>().map_err(|_| bad())? / 100.0;
            } else if token.eq_ignore_ascii_case("MP2") {
                layers.push(LayerDesc::MaxPool);
            } else if let Some(units) = token.strip_suffix('N') {
                layers.push(LayerDesc::Fc { units: units.parse().map_err(|_| bad())? });
                drop.push(std::mem::take(&mut pending));
            } else if let Some((filters, size)) = token.split_once('C') {
                layers.push(LayerDesc::Conv { filters: filters.parse().map_err(|_| bad())?, size: size.parse().map_err(|_| bad())? });
                drop.push(std::mem::take(&mut pending));
            } else {
                return Err(bad());
            }
        }
        let spec = ConvNetSpec { channels, side, layers, drop };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.stages().map(|_| ())
    }

    pub fn weight_layers(&self) -> usize {
        self.layers.iter().filter(|l| !matches!(l, LayerDesc::MaxPool)).count()
    }

    /// Same architecture with dropout switched off.
    pub fn without_dropout(&self) -> ConvNetSpec {
        ConvNetSpec { drop: vec![0.0; self.drop.len()], ..self.clone() }
    }

    fn stages(&self) -> Result<Vec<Stage>> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.side == 0 {
            return err("input geometry must be positive".into());
        }
        if self.drop.len() != self.weight_layers() {
            return err(format!("{} drop probabilities for {} weight layers", self.drop.len(), self.weight_layers()));
        }
        if let Some(&p) = self.drop.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::DropProbability(p));
        }
        if !matches!(self.layers.last(), Some(LayerDesc::Fc { .. })) {
            return err("the last layer must be fully connected".into());
        }
        if matches!(self.layers.first(), Some(LayerDesc::Conv { .. })) && self.drop[0] > 0.0 {
            return err("input channels of a convolutional net are never dropped".into());
        }
        let (mut c, mut side, mut flat) = (self.channels, self.side, false);
        let mut k = 0;
        let mut stages = Vec::new();
        for layer in &self.layers {
            match *layer {
                LayerDesc::Conv { filters, size } => {
                    if flat {
                        return err("convolution after a fully-connected layer".into());
                    }
                    if filters == 0 || size == 0 || size > side {
                        return err(format!("{filters}C{size} does not fit a {side}x{side} input"));
                    }
                    stages.push(Stage::Conv { layer: k, c, m: filters, f: size, side });
                    c = filters;
                    side = side - size + 1;
                    k += 1;
                }
                LayerDesc::MaxPool => {
                    if flat || side % 2 != 0 {
                        return err(format!("2x2 pooling needs an even side, got {side}"));
                    }
                    stages.push(Stage::Pool { side });
                    side /= 2;
                }
                LayerDesc::Fc { units } => {
                    if units == 0 {
                        return err("layer widths must be positive".into());
                    }
                    let plane = if flat { 1 } else { side * side };
                    stages.push(Stage::Fc { layer: k, units: c, plane, out: units });
                    c = units;
                    side = 1;
                    flat = true;
                    k += 1;
                }
            }
        }
        Ok(stages)
    }
}

fn check_geometry(x_cols: usize, c: usize, side: usize, op: &'static str) -> Result<()> {
    if x_cols != c * side * side {
        return Err(Error::shape(op, format!("{x_cols} values per sample for {c}x{side}x{side}")));
    }
    Ok(())
}

/// Unrolls one sample (`c × s × s`) into a `(c·f·f) × (s−f+1)²` matrix.
fn im2col<T: Element>(sample: &[T], c: usize, side: usize, f: usize) -> Matrix<T> {
    let so = side - f + 1;
    let mut cols = Matrix::zeros(c * f * f, so * so);
    for ci in 0..c {
        let plane = &sample[ci * side * side..(ci + 1) * side * side];
        for dy in 0..f {
            for dx in 0..f {
                let row = cols.row_mut((ci * f + dy) * f + dx);
                for y in 0..so {
                    let src = &plane[(y + dy) * side + dx..(y + dy) * side + dx + so];
                    row[y * so..(y + 1) * so].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates `cols` into one sample's gradient.
fn col2im_add<T: Element>(cols: &Matrix<T>, out: &mut [T], c: usize, side: usize, f: usize) {
    let so = side - f + 1;
    for ci in 0..c {
        let plane = &mut out[ci * side * side..(ci + 1) * side * side];
        for dy in 0..f {
            for dx in 0..f {
                let row = cols.row((ci * f + dy) * f + dx);
                for y in 0..so {
                    let dst = &mut plane[(y + dy) * side + dx..(y + dy) * side + dx + so];
                    for (d, &v) in dst.iter_mut().zip(&row[y * so..(y + 1) * so]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Convolution of a batch stored as `b × (c·s·s)` with filters `m × (c·f·f)`.
fn conv_rows<T: Element>(
    x: &Matrix<T>,
    c: usize,
    side: usize,
    w: &Matrix<T>,
    bias: Option<&[T]>,
    f: usize,
    summation: Summation,
) -> Result<Matrix<T>> {
    check_geometry(x.cols(), c, side, "conv_forward")?;
    if f == 0 || f > side || w.cols() != c * f * f {
        return Err(Error::shape("conv_forward", format!("filters {}x{} for {c} channels of side {side}, f = {f}", w.rows(), w.cols())));
    }
    let m = w.rows();
    let so = side - f + 1;
    let mut out = Matrix::zeros(x.rows(), m * so * so);
    for n in 0..x.rows() {
        let cols = im2col(x.row(n), c, side, f);
        let y = matmul_with(w, &cols, summation)?;
        let dst = out.row_mut(n);
        dst.copy_from_slice(y.as_slice());
        if let Some(bias) = bias {
            for (o, &bo) in bias.iter().enumerate() {
                for v in &mut dst[o * so * so..(o + 1) * so * so] {
                    *v += bo;
                }
            }
        }
    }
    out.check_finite("conv_forward")?;
    Ok(out)
}

fn filters_as_matrix<T: Element>(w: &Tensor4<T>) -> Matrix<T> {
    let cff = w.channels() * w.plane();
    Matrix::from_vec(w.batch(), cff, w.as_slice().to_vec()).expect("tensor holds m·c·f·f values")
}

/// Valid, stride-1 cross-correlation of `x` (`b × c × s × s`) with `w`
/// (`m × c × f × f`).
pub fn conv_forward<T: Element>(w: &Tensor4<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    if w.channels() != x.channels() {
        return Err(Error::shape("conv_forward", format!("{} filter channels for {} input channels", w.channels(), x.channels())));
    }
    let (c, side, f) = (x.channels(), x.side(), w.side());
    let xm = Matrix::from_vec(x.batch(), c * side * side, x.as_slice().to_vec())?;
    let out = conv_rows(&xm, c, side, &filters_as_matrix(w), None, f, Summation::Deterministic)?;
    Tensor4::from_matrix(out, w.batch(), side.saturating_sub(f) + 1)
}

/// Convolution of the kept input channels with the filter subarray
/// `W[out_keep, in_keep, :, :]`; dropped filters are never evaluated.
pub fn conv_forward_batchwise<T: Element>(
    w: &Tensor4<T>,
    x_compact: &Tensor4<T>,
    in_keep: &IndexSet,
    out_keep: &IndexSet,
) -> Result<Tensor4<T>> {
    if x_compact.channels() != in_keep.len() || in_keep.parent() != w.channels() || out_keep.parent() != w.batch() {
        return Err(Error::shape("conv_forward_batchwise", "index sets do not match the filter bank or the compact input"));
    }
    let (side, f) = (x_compact.side(), w.side());
    let wm = gather_submatrix(&filters_as_matrix(w), out_keep, &in_keep.expand(f * f))?;
    let xm = Matrix::from_vec(x_compact.batch(), in_keep.len() * side * side, x_compact.as_slice().to_vec())?;
    let out = conv_rows(&xm, in_keep.len(), side, &wm, None, f, Summation::Deterministic)?;
    Tensor4::from_matrix(out, out_keep.len(), side.saturating_sub(f) + 1)
}

/// 2×2 max-pooling over a batch stored as `b × (c·s·s)`. Returns the pooled
/// batch and, per output entry, the column of the winning input.
fn pool_rows<T: Element>(x: &Matrix<T>, c: usize, side: usize) -> Result<(Matrix<T>, Vec<u32>)> {
    check_geometry(x.cols(), c, side, "maxpool2")?;
    if side % 2 != 0 {
        return Err(Error::shape("maxpool2", format!("odd side {side}")));
    }
    let h = side / 2;
    let mut out = Matrix::zeros(x.rows(), c * h * h);
    let mut arg = Vec::with_capacity(x.rows() * c * h * h);
    for n in 0..x.rows() {
        let src = x.row(n);
        let dst = out.row_mut(n);
        for ci in 0..c {
            let base = ci * side * side;
            for y in 0..h {
                for xx in 0..h {
                    let top = base + 2 * y * side + 2 * xx;
                    let mut best = top;
                    for cand in [top + 1, top + side, top + side + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    dst[(ci * h + y) * h + xx] = src[best];
                    arg.push(best as u32);
                }
            }
        }
    }
    Ok((out, arg))
}

fn unpool_rows<T: Element>(grad: &Matrix<T>, arg: &[u32], in_cols: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(grad.rows(), in_cols);
    let per = grad.cols();
    for n in 0..grad.rows() {
        let g = grad.row(n);
        let dst = out.row_mut(n);
        for (j, &src) in arg[n * per..(n + 1) * per].iter().enumerate() {
            dst[src as usize] += g[j];
        }
    }
    out
}

/// Disjoint 2×2 max-pooling. The second value holds, per output entry, the
/// flat index within its sample of the winning input; ties go to the lowest index.
pub fn maxpool2<T: Element>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<u32>)> {
    let xm = Matrix::from_vec(x.batch(), x.channels() * x.plane(), x.as_slice().to_vec())?;
    let (out, arg) = pool_rows(&xm, x.channels(), x.side())?;
    Ok((Tensor4::from_matrix(out, x.channels(), x.side() / 2)?, arg))
}

/// Routes each pooled gradient back to its argmax position.
pub fn maxpool2_backward<T: Element>(grad: &Tensor4<T>, argmax: &[u32]) -> Result<Tensor4<T>> {
    if argmax.len() != grad.as_slice().len() {
        return Err(Error::shape("maxpool2_backward", "argmax length differs from the gradient"));
    }
    let side = grad.side() * 2;
    let gm = Matrix::from_vec(grad.batch(), grad.channels() * grad.plane(), grad.as_slice().to_vec())?;
    let out = unpool_rows(&gm, argmax, grad.channels() * side * side);
    Tensor4::from_matrix(out, grad.channels(), side)
}

/// Per-element Bernoulli dropout of a feature-map batch.
pub fn dropout_conv_independent<T: Element>(x: &Tensor4<T>, p: f64, rng: &mut Rng) -> Result<Tensor4<T>> {
    let mask = sample_independent(x.batch(), x.channels() * x.plane(), p, rng)?;
    let mut m = Matrix::from_vec(x.batch(), x.channels() * x.plane(), x.as_slice().to_vec())?;
    mask.apply(&mut m)?;
    Tensor4::from_matrix(m, x.channels(), x.side())
}

fn activate<T: Element>(pre: &Matrix<T>, hidden: bool) -> Matrix<T> {
    let mut out = pre.clone();
    if hidden {
        model::relu_in_place(out.as_mut_slice());
    }
    out
}

#[derive(Debug, Clone)]
enum Record<T> {
    Weight { input: Matrix<T>, pre: Matrix<T>, sub_weight: Option<Matrix<T>> },
    Pool { argmax: Vec<u32>, in_cols: usize },
}

/// State kept by [`ConvNet::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvTrace<T> {
    pub path: Path,
    /// Kept units (channels or neurons) of every weight layer's input level,
    /// plus the output level. Batchwise path only.
    pub keep: Vec<IndexSet>,
    pub masks: Vec<Option<DropoutMask>>,
    pub probs: Matrix<T>,
    pub loss: f64,
    records: Vec<Record<T>>,
    version: u64,
}

impl<T: Element> ConvTrace<T> {
    /// Input to weight layer `k` as it entered the product: full-width and
    /// masked, or compact on the batchwise path.
    pub fn layer_input(&self, k: usize) -> Option<&Matrix<T>> {
        self.records.iter().filter_map(|r| match r {
            Record::Weight { input, .. } => Some(input),
            Record::Pool { .. } => None,
        }).nth(k)
    }
}

#[derive(Debug, Clone)]
pub struct ConvNet<T> {
    spec: ConvNetSpec,
    stages: Vec<Stage>,
    layers: Vec<Layer<T>>,
    summation: Summation,
    version: u64,
}

impl<T: Element> ConvNet<T> {
    pub fn new(spec: ConvNetSpec, seed: u64) -> Result<Self> {
        let stages = spec.stages()?;
        let layers = stages
            .iter()
            .filter_map(|s| match *s {
                Stage::Conv { layer, c, m, f, .. } => Some(glorot_layer(m, c * f * f, m, c * f * f, m * f * f, seed, layer)),
                Stage::Fc { layer, units, plane, out } => Some(glorot_layer(units * plane, out, out, units * plane, out, seed, layer)),
                Stage::Pool { .. } => None,
            })
            .collect();
        Ok(ConvNet { spec, stages, layers, summation: Summation::Deterministic, version: 0 })
    }

    pub fn from_layers(spec: ConvNetSpec, layers: Vec<Layer<T>>) -> Result<Self> {
        let fresh = ConvNet::<T>::new(spec, 0)?;
        if layers.len() != fresh.layers.len()
            || layers.iter().zip(&fresh.layers).any(|(a, b)| a.weight.shape() != b.weight.shape() || a.bias.len() != b.bias.len())
        {
            return Err(Error::Config("layers do not match the architecture".into()));
        }
        Ok(ConvNet { layers, ..fresh })
    }

    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    pub fn set_summation(&mut self, summation: Summation) {
        self.summation = summation;
    }

    fn input_cols(&self) -> usize {
        self.spec.channels * self.spec.side * self.spec.side
    }

    fn shapes(&self) -> Vec<LevelShape> {
        self.stages
            .iter()
            .filter_map(|s| match *s {
                Stage::Conv { c, side, .. } => Some(LevelShape { units: c, plane: side * side }),
                Stage::Fc { units, plane, .. } => Some(LevelShape { units, plane }),
                Stage::Pool { .. } => None,
            })
            .collect()
    }

    fn out_units(&self) -> usize {
        match self.stages.last() {
            Some(Stage::Fc { out, .. }) => *out,
            _ => unreachable!("validated spec ends in a fully-connected layer"),
        }
    }

    fn check_masks(&self, b: usize, masks: &[Option<DropoutMask>], path: Path) -> Result<()> {
        if path == Path::None {
            if masks.iter().any(Option::is_some) {
                return Err(Error::shape("forward_train", "masks given for the no-dropout path"));
            }
            return Ok(());
        }
        let shapes = self.shapes();
        if masks.len() != shapes.len() {
            return Err(Error::shape("forward_train", format!("{} masks for {} levels", masks.len(), shapes.len())));
        }
        for (k, (mask, shape)) in masks.iter().zip(&shapes).enumerate() {
            let Some(mask) = mask else { continue };
            let ok = match path {
                Path::Independent => mask.mode() == MaskMode::Independent && mask.rows() == b && mask.cols() == shape.units * shape.plane,
                Path::Batchwise => mask.mode() == MaskMode::Batchwise && mask.cols() == shape.units,
                Path::None => unreachable!(),
            };
            if !ok {
                return Err(Error::shape("forward_train", format!("level {k}: mask {}x{} on the {path} path", mask.rows(), mask.cols())));
            }
        }
        Ok(())
    }

    pub fn forward_train(
        &self,
        x: &Matrix<T>,
        labels: &[usize],
        masks: &[Option<DropoutMask>],
        path: Path,
    ) -> Result<ConvTrace<T>> {
        if x.cols() != self.input_cols() {
            return Err(Error::shape("forward_train", format!("{} input values for a {} input", x.cols(), self.input_cols())));
        }
        self.check_masks(x.rows(), masks, path)?;
        let s = self.summation;
        let shapes = self.shapes();
        let ell = self.layers.len();
        let keep: Vec<IndexSet> = if path == Path::Batchwise {
            let mut keep: Vec<IndexSet> = shapes
                .iter()
                .enumerate()
                .map(|(k, sh)| match masks.get(k).and_then(Option::as_ref) {
                    Some(m) => m.keep_set().cloned().expect("batchwise mask carries its index set"),
                    None => IndexSet::all(sh.units),
                })
                .collect();
            keep.push(IndexSet::all(self.out_units()));
            keep
        } else {
            Vec::new()
        };

        let mut act = if path == Path::Batchwise { gather_cols(x, &keep[0].expand(shapes[0].plane))? } else { x.clone() };
        let mut channels = self.spec.channels;
        let mut records = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            match *stage {
                Stage::Pool { side } => {
                    let (out, argmax) = pool_rows(&act, channels, side)?;
                    records.push(Record::Pool { argmax, in_cols: act.cols() });
                    act = out;
                }
                Stage::Conv { layer: k, f, side, .. } => {
                    if let (Path::Independent, Some(Some(mask))) = (path, masks.get(k)) {
                        mask.apply(&mut act)?;
                    }
                    let layer = &self.layers[k];
                    let (pre, sub_weight) = if path == Path::Batchwise {
                        let w = gather_submatrix(&layer.weight, &keep[k + 1], &keep[k].expand(f * f))?;
                        let bias = gather_vec(&layer.bias, &keep[k + 1])?;
                        (conv_rows(&act, keep[k].len(), side, &w, Some(&bias), f, s)?, Some(w))
                    } else {
                        (conv_rows(&act, shapes[k].units, side, &layer.weight, Some(&layer.bias), f, s)?, None)
                    };
                    channels = sub_weight.as_ref().map_or(layer.weight.rows(), Matrix::rows);
                    let next = activate(&pre, k + 1 < ell);
                    records.push(Record::Weight { input: std::mem::replace(&mut act, next), pre, sub_weight });
                }
                Stage::Fc { layer: k, plane, .. } => {
                    if let (Path::Independent, Some(Some(mask))) = (path, masks.get(k)) {
                        mask.apply(&mut act)?;
                    }
                    let layer = &self.layers[k];
                    let (pre, sub_weight) = if path == Path::Batchwise {
                        let w = gather_submatrix(&layer.weight, &keep[k].expand(plane), &keep[k + 1])?;
                        let bias = gather_vec(&layer.bias, &keep[k + 1])?;
                        let mut z = matmul_with(&act, &w, s)?;
                        z.add_row_vector(&bias)?;
                        (z, Some(w))
                    } else {
                        let mut z = matmul_with(&act, &layer.weight, s)?;
                        z.add_row_vector(&layer.bias)?;
                        (z, None)
                    };
                    channels = pre.cols();
                    let next = activate(&pre, k + 1 < ell);
                    records.push(Record::Weight { input: std::mem::replace(&mut act, next), pre, sub_weight });
                }
            }
        }
        let logits = match records.last() {
            Some(Record::Weight { pre, .. }) => pre,
            _ => unreachable!(),
        };
        let (probs, loss) = model::softmax_nll(logits, labels)?;
        Ok(ConvTrace { path, keep, masks: masks.to_vec(), probs, loss, records, version: self.version })
    }

    pub fn backward(&self, trace: &ConvTrace<T>, labels: &[usize]) -> Result<Vec<LayerGrad<T>>> {
        if trace.version != self.version {
            return Err(Error::Trace("parameters changed since the forward pass".into()));
        }
        if trace.records.len() != self.stages.len() || labels.len() != trace.probs.rows() {
            return Err(Error::Trace("trace does not belong to this network or minibatch".into()));
        }
        let s = self.summation;
        let ell = self.layers.len();
        let shapes = self.shapes();
        let batchwise = trace.path == Path::Batchwise;
        let mut delta = model::output_delta(&trace.probs, labels);
        let mut grads: Vec<Option<LayerGrad<T>>> = vec![None; ell];
        for (stage, record) in self.stages.iter().zip(&trace.records).rev() {
            match (*stage, record) {
                (Stage::Pool { .. }, Record::Pool { argmax, in_cols }) => {
                    delta = unpool_rows(&delta, argmax, *in_cols);
                }
                (Stage::Conv { layer: k, f, side, .. }, Record::Weight { input, pre, sub_weight }) => {
                    if k + 1 < ell {
                        model::relu_backward(delta.as_mut_slice(), pre.as_slice());
                    }
                    let w = sub_weight.as_ref().unwrap_or(&self.layers[k].weight);
                    let (m, cff) = w.shape();
                    let c = cff / (f * f);
                    let so = side - f + 1;
                    let mut gw = Matrix::zeros(m, cff);
                    let mut gb = vec![T::ZERO; m];
                    let mut delta_in = (k > 0).then(|| Matrix::zeros(input.rows(), input.cols()));
                    for n in 0..input.rows() {
                        let dn = Matrix::from_vec(m, so * so, delta.row(n).to_vec())?;
                        let cols = im2col(input.row(n), c, side, f);
                        gw.add_assign(&matmul_bt_with(&dn, &cols, s)?)?;
                        for (o, g) in gb.iter_mut().enumerate() {
                            for &v in dn.row(o) {
                                *g += v;
                            }
                        }
                        if let Some(d) = delta_in.as_mut() {
                            let dcols = matmul_at_with(w, &dn, s)?;
                            col2im_add(&dcols, d.row_mut(n), c, side, f);
                        }
                    }
                    let active = batchwise.then(|| Active {
                        rows: trace.keep[k + 1].clone(),
                        cols: trace.keep[k].expand(f * f),
                        outputs: trace.keep[k + 1].clone(),
                    });
                    grads[k] = Some(LayerGrad { weight: gw, bias: gb, active });
                    if let Some(mut d) = delta_in {
                        if let (Path::Independent, Some(Some(mask))) = (trace.path, trace.masks.get(k)) {
                            mask.apply(&mut d)?;
                        }
                        delta = d;
                    }
                }
                (Stage::Fc { layer: k, .. }, Record::Weight { input, pre, sub_weight }) => {
                    if k + 1 < ell {
                        model::relu_backward(delta.as_mut_slice(), pre.as_slice());
                    }
                    let weight = matmul_at_with(input, &delta, s)?;
                    let bias = delta.column_sums();
                    let active = batchwise.then(|| Active {
                        rows: trace.keep[k].expand(shapes[k].plane),
                        cols: trace.keep[k + 1].clone(),
                        outputs: trace.keep[k + 1].clone(),
                    });
                    grads[k] = Some(LayerGrad { weight, bias, active });
                    if k > 0 {
                        let w = sub_weight.as_ref().unwrap_or(&self.layers[k].weight);
                        let mut d = matmul_bt_with(&delta, w, s)?;
                        if let (Path::Independent, Some(Some(mask))) = (trace.path, trace.masks.get(k)) {
                            mask.apply(&mut d)?;
                        }
                        delta = d;
                    }
                }
                _ => return Err(Error::Trace("trace records do not match the architecture".into())),
            }
        }
        Ok(grads.into_iter().map(|g| g.expect("every weight layer visited")).collect())
    }

    pub fn eval_logits(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.input_cols() {
            return Err(Error::shape("forward_eval", format!("{} input values for a {} input", x.cols(), self.input_cols())));
        }
        let ell = self.layers.len();
        let mut act = x.clone();
        let mut channels = self.spec.channels;
        for stage in &self.stages {
            match *stage {
                Stage::Pool { side } => act = pool_rows(&act, channels, side)?.0,
                Stage::Conv { layer: k, c, m, f, side } => {
                    if self.spec.drop[k] > 0.0 {
                        act.scale(T::from_f64(1.0 - self.spec.drop[k]));
                    }
                    let layer = &self.layers[k];
                    act = conv_rows(&act, c, side, &layer.weight, Some(&layer.bias), f, self.summation)?;
                    if k + 1 < ell {
                        model::relu_in_place(act.as_mut_slice());
                    }
                    channels = m;
                }
                Stage::Fc { layer: k, out, .. } => {
                    if self.spec.drop[k] > 0.0 {
                        act.scale(T::from_f64(1.0 - self.spec.drop[k]));
                    }
                    let layer = &self.layers[k];
                    let mut z = matmul_with(&act, &layer.weight, self.summation)?;
                    z.add_row_vector(&layer.bias)?;
                    if k + 1 < ell {
                        model::relu_in_place(z.as_mut_slice());
                    }
                    act = z;
                    channels = out;
                }
            }
        }
        Ok(act)
    }

    pub fn forward_eval(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let probs = model::softmax(&self.eval_logits(x)?);
        probs.check_finite("forward_eval")?;
        Ok(probs)
    }

    /// Multiplication count of one training pass, using the kept-unit counts
    /// of `masks` on the batchwise path.
    pub fn cost(&self, b: usize, path: Path, masks: &[Option<DropoutMask>]) -> CostModel {
        let shapes = self.shapes();
        let kept = |k: usize| -> usize {
            if path != Path::Batchwise {
                return shapes.get(k).map_or(self.out_units(), |s| s.units);
            }
            match (shapes.get(k), masks.get(k).and_then(Option::as_ref)) {
                (None, _) => self.out_units(),
                (Some(_), Some(m)) => m.popcount(),
                (Some(s), None) => s.units,
            }
        };
        let layers = self
            .stages
            .iter()
            .filter_map(|st| match *st {
                Stage::Conv { layer, f, side, .. } => {
                    let so = side - f + 1;
                    Some(LayerCost::gemm(b * so * so, kept(layer) * f * f, kept(layer + 1)))
                }
                Stage::Fc { layer, plane, .. } => Some(LayerCost::gemm(b, kept(layer) * plane, kept(layer + 1))),
                Stage::Pool { .. } => None,
            })
            .collect();
        CostModel { layers }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        self.version += 1;
        &mut self.layers
    }
}

impl<T: Element> Network<T> for ConvNet<T> {
    type Trace = ConvTrace<T>;

    fn drop_probs(&self) -> &[f64] {
        &self.spec.drop
    }

    fn level_shapes(&self) -> Vec<LevelShape> {
        self.shapes()
    }

    fn input_width(&self) -> usize {
        self.input_cols()
    }

    fn classes(&self) -> usize {
        self.out_units()
    }

    fn forward_train(&self, x: &Matrix<T>, labels: &[usize], masks: &[Option<DropoutMask>], path: Path) -> Result<ConvTrace<T>> {
        ConvNet::forward_train(self, x, labels, masks, path)
    }

    fn trace_loss(trace: &ConvTrace<T>) -> f64 {
        trace.loss
    }

    fn trace_probs(trace: &ConvTrace<T>) -> &Matrix<T> {
        &trace.probs
    }

    fn backward(&self, trace: &ConvTrace<T>, labels: &[usize]) -> Result<Vec<LayerGrad<T>>> {
        ConvNet::backward(self, trace, labels)
    }

    fn forward_eval(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        ConvNet::forward_eval(self, x)
    }

    fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    fn layers_mut(&mut self) -> &mut [Layer<T>] {
        ConvNet::layers_mut(self)
    }

    fn mult_count(&self, b: usize, path: Path, masks: &[Option<DropoutMask>]) -> u128 {
        self.cost(b, path, masks).total()
    }
}
