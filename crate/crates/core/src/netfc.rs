//! Fully-connected rectifier network with a softmax output and three
//! training paths.
//!
//! For level `k` with activations `x_k` (`b × n_k`) and weights `W_k`
//! (`n_k × n_{k+1}`):
//!
//! * [`Path::None`]: `x_{k+1} = f(x_k × W_k + β)`.
//! * [`Path::Independent`]: `x_{k+1} = f((x_k ⊙ d_k) × W_k + β)` with a
//!   `b × n_k` mask `d_k`.
//! * [`Path::Batchwise`]: with kept index sets `K_k`, the network only ever
//!   holds `x_k[:, K_k]` and multiplies by `W_k[K_k, K_{k+1}]`.
//!
//! Dropout is applied with raw 0/1 masks during training; evaluation uses
//! the whole network with each layer's input scaled by `1 − p_k`.

use serde::{Deserialize, Serialize};

use crate::dropout::{DropoutMask, MaskMode};
use crate::error::{Error, Result};
use crate::model::{self, LevelShape, Network, Path};
use crate::params::{glorot_layer, Active, Layer, LayerGrad};
use crate::tensor::{
    gather_cols, gather_submatrix, gather_vec, matmul_at_with, matmul_bt_with, matmul_with, Element, IndexSet,
    Matrix, Summation,
};

/// Layer widths `n_0..n_ℓ` and drop probabilities `p_0..p_{ℓ−1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub widths: Vec<usize>,
    pub drop: Vec<f64>,
}

impl NetSpec {
    pub fn new(widths: Vec<usize>, drop: Vec<f64>) -> Result<Self> {
        let spec = NetSpec { widths, drop };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec with every drop probability zero.
    pub fn without_dropout(widths: Vec<usize>) -> Result<Self> {
        let drop = vec![0.0; widths.len().saturating_sub(1)];
        Self::new(widths, drop)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config("a network needs at least an input and an output level".into()));
        }
        if self.widths.iter().any(|&n| n == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.drop.len() != self.widths.len() - 1 {
            return Err(Error::Config(format!(
                "{} drop probabilities for {} weight layers",
                self.drop.len(),
                self.widths.len() - 1
            )));
        }
        if let Some(&p) = self.drop.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::DropProbability(p));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Same input and output, hidden widths halved, no dropout.
    pub fn halved_hidden(&self) -> NetSpec {
        let last = self.widths.len() - 1;
        let widths = self
            .widths
            .iter()
            .enumerate()
            .map(|(k, &n)| if k == 0 || k == last { n } else { (n / 2).max(1) })
            .collect::<Vec<_>>();
        NetSpec { drop: vec![0.0; widths.len() - 1], widths }
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub path: Path,
    /// Input to layer `k`: `x_k ⊙ d_k` (full width) or `x_k[:, K_k]` (batchwise).
    pub inputs: Vec<Matrix<T>>,
    /// Pre-activation of level `k + 1`, compact on the batchwise path.
    pub pre: Vec<Matrix<T>>,
    /// `W_k[K_k, K_{k+1}]`, batchwise path only.
    pub sub_weights: Vec<Matrix<T>>,
    /// Kept units of every level, batchwise path only (output level: all).
    pub keep: Vec<IndexSet>,
    pub masks: Vec<Option<DropoutMask>>,
    pub probs: Matrix<T>,
    pub loss: f64,
    version: u64,
}

#[derive(Debug, Clone)]
pub struct FcNet<T> {
    spec: NetSpec,
    layers: Vec<Layer<T>>,
    summation: Summation,
    version: u64,
}

impl<T: Element> FcNet<T> {
    /// Fresh network with uniform Glorot weights drawn from `seed`.
    pub fn new(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layers = (0..spec.layers())
            .map(|k| {
                let (n_in, n_out) = (spec.widths[k], spec.widths[k + 1]);
                glorot_layer(n_in, n_out, n_out, n_in, n_out, seed, k)
            })
            .collect();
        Ok(FcNet { spec, layers, summation: Summation::Deterministic, version: 0 })
    }

    pub fn from_layers(spec: NetSpec, layers: Vec<Layer<T>>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers() {
            return Err(Error::Config(format!("{} layers for a {}-layer spec", layers.len(), spec.layers())));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.weight.shape() != (spec.widths[k], spec.widths[k + 1]) || layer.bias.len() != spec.widths[k + 1] {
                return Err(Error::Config(format!("layer {k} does not match the spec widths")));
            }
        }
        Ok(FcNet { spec, layers, summation: Summation::Deterministic, version: 0 })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn summation(&self) -> Summation {
        self.summation
    }

    pub fn set_summation(&mut self, summation: Summation) {
        self.summation = summation;
    }

    fn check_masks(&self, b: usize, masks: &[Option<DropoutMask>], path: Path) -> Result<()> {
        if path == Path::None {
            if masks.iter().any(Option::is_some) {
                return Err(Error::shape("forward_train", "masks given for the no-dropout path"));
            }
            return Ok(());
        }
        if masks.len() != self.spec.layers() {
            return Err(Error::shape("forward_train", format!("{} masks for {} levels", masks.len(), self.spec.layers())));
        }
        for (k, mask) in masks.iter().enumerate() {
            let Some(mask) = mask else { continue };
            let n = self.spec.widths[k];
            let ok = match path {
                Path::Independent => mask.mode() == MaskMode::Independent && mask.rows() == b && mask.cols() == n,
                Path::Batchwise => mask.mode() == MaskMode::Batchwise && mask.cols() == n,
                Path::None => unreachable!(),
            };
            if !ok {
                return Err(Error::shape(
                    "forward_train",
                    format!("level {k}: {:?} mask {}x{} on the {path} path, batch {b}, width {n}", mask.mode(), mask.rows(), mask.cols()),
                ));
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
    ) -> Result<ForwardTrace<T>> {
        if x.cols() != self.spec.widths[0] {
            return Err(Error::shape("forward_train", format!("input width {} for a {}-wide input level", x.cols(), self.spec.widths[0])));
        }
        let b = x.rows();
        self.check_masks(b, masks, path)?;
        let ell = self.spec.layers();
        let s = self.summation;
        let mask_at = |k: usize| masks.get(k).and_then(Option::as_ref);

        let mut inputs = Vec::with_capacity(ell);
        let mut pre = Vec::with_capacity(ell);
        let mut sub_weights = Vec::new();
        let mut keep = Vec::new();

        match path {
            Path::None | Path::Independent => {
                let mut act = x.clone();
                for k in 0..ell {
                    if let (Path::Independent, Some(mask)) = (path, mask_at(k)) {
                        mask.apply(&mut act)?;
                    }
                    let layer = &self.layers[k];
                    let mut z = matmul_with(&act, &layer.weight, s)?;
                    z.add_row_vector(&layer.bias)?;
                    inputs.push(act);
                    act = z.clone();
                    if k + 1 < ell {
                        model::relu_in_place(act.as_mut_slice());
                    }
                    pre.push(z);
                }
            }
            Path::Batchwise => {
                keep = (0..ell)
                    .map(|k| match mask_at(k) {
                        Some(mask) => mask.keep_set().cloned().expect("batchwise mask carries its index set"),
                        None => IndexSet::all(self.spec.widths[k]),
                    })
                    .collect();
                keep.push(IndexSet::all(self.spec.widths[ell]));
                let mut act = gather_cols(x, &keep[0])?;
                for k in 0..ell {
                    let layer = &self.layers[k];
                    let w = gather_submatrix(&layer.weight, &keep[k], &keep[k + 1])?;
                    let bias = gather_vec(&layer.bias, &keep[k + 1])?;
                    let mut z = matmul_with(&act, &w, s)?;
                    z.add_row_vector(&bias)?;
                    inputs.push(act);
                    sub_weights.push(w);
                    act = z.clone();
                    if k + 1 < ell {
                        model::relu_in_place(act.as_mut_slice());
                    }
                    pre.push(z);
                }
            }
        }
        let (probs, loss) = model::softmax_nll(pre.last().expect("at least one layer"), labels)?;
        Ok(ForwardTrace {
            path,
            inputs,
            pre,
            sub_weights,
            keep,
            masks: masks.to_vec(),
            probs,
            loss,
            version: self.version,
        })
    }

    /// Gradients of the mean loss. On the batchwise path they are compact
    /// (`|K_k| × |K_{k+1}|`) and carry their index sets.
    pub fn backward(&self, trace: &ForwardTrace<T>, labels: &[usize]) -> Result<Vec<LayerGrad<T>>> {
        let ell = self.spec.layers();
        if trace.version != self.version {
            return Err(Error::Trace("parameters changed since the forward pass".into()));
        }
        if trace.inputs.len() != ell || trace.pre.len() != ell || labels.len() != trace.probs.rows() {
            return Err(Error::Trace("trace does not belong to this network or minibatch".into()));
        }
        let s = self.summation;
        let mut delta = model::output_delta(&trace.probs, labels);
        let mut grads = Vec::with_capacity(ell);
        for k in (0..ell).rev() {
            let weight = matmul_at_with(&trace.inputs[k], &delta, s)?;
            let bias = delta.column_sums();
            let next = if k > 0 {
                let w = match trace.path {
                    Path::Batchwise => &trace.sub_weights[k],
                    _ => &self.layers[k].weight,
                };
                let mut g = matmul_bt_with(&delta, w, s)?;
                model::relu_backward(g.as_mut_slice(), trace.pre[k - 1].as_slice());
                if let (Path::Independent, Some(Some(mask))) = (trace.path, trace.masks.get(k)) {
                    mask.apply(&mut g)?;
                }
                Some(g)
            } else {
                None
            };
            let active = (trace.path == Path::Batchwise).then(|| Active {
                rows: trace.keep[k].clone(),
                cols: trace.keep[k + 1].clone(),
                outputs: trace.keep[k + 1].clone(),
            });
            grads.push(LayerGrad { weight, bias, active });
            if let Some(g) = next {
                delta = g;
            }
        }
        grads.reverse();
        Ok(grads)
    }

    /// Output-layer pre-activations of the full network, inputs of layer `k`
    /// scaled by `1 − p_k`.
    pub fn eval_logits(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.spec.widths[0] {
            return Err(Error::shape("forward_eval", format!("input width {} for a {}-wide input level", x.cols(), self.spec.widths[0])));
        }
        let ell = self.spec.layers();
        let mut act = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let p = self.spec.drop[k];
            if p > 0.0 {
                act.scale(T::from_f64(1.0 - p));
            }
            let mut z = matmul_with(&act, &layer.weight, self.summation)?;
            z.add_row_vector(&layer.bias)?;
            if k + 1 < ell {
                model::relu_in_place(z.as_mut_slice());
            }
            act = z;
        }
        Ok(act)
    }

    pub fn forward_eval(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let logits = self.eval_logits(x)?;
        let probs = model::softmax(&logits);
        probs.check_finite("forward_eval")?;
        Ok(probs)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Mutable access to the parameters. Any outstanding trace becomes stale.
    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        self.version += 1;
        &mut self.layers
    }
}

impl<T: Element> Network<T> for FcNet<T> {
    type Trace = ForwardTrace<T>;

    fn drop_probs(&self) -> &[f64] {
        &self.spec.drop
    }

    fn level_shapes(&self) -> Vec<LevelShape> {
        self.spec.widths[..self.spec.layers()].iter().map(|&units| LevelShape { units, plane: 1 }).collect()
    }

    fn input_width(&self) -> usize {
        self.spec.widths[0]
    }

    fn classes(&self) -> usize {
        *self.spec.widths.last().unwrap()
    }

    fn forward_train(&self, x: &Matrix<T>, labels: &[usize], masks: &[Option<DropoutMask>], path: Path) -> Result<ForwardTrace<T>> {
        FcNet::forward_train(self, x, labels, masks, path)
    }

    fn trace_loss(trace: &ForwardTrace<T>) -> f64 {
        trace.loss
    }

    fn trace_probs(trace: &ForwardTrace<T>) -> &Matrix<T> {
        &trace.probs
    }

    fn backward(&self, trace: &ForwardTrace<T>, labels: &[usize]) -> Result<Vec<LayerGrad<T>>> {
        FcNet::backward(self, trace, labels)
    }

    fn forward_eval(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        FcNet::forward_eval(self, x)
    }

    fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    fn layers_mut(&mut self) -> &mut [Layer<T>] {
        FcNet::layers_mut(self)
    }

    fn mult_count(&self, b: usize, path: Path, masks: &[Option<DropoutMask>]) -> u128 {
        let kept = crate::bench::kept_counts(&self.spec.widths, path, masks);
        crate::bench::count_from_kept(b, &kept).total()
    }
}
