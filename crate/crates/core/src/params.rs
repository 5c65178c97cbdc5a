//! Trainable parameter blocks shared by the fully-connected and
//! convolutional networks.

use crate::dropout::{Rng, Stream};
use crate::tensor::{Element, IndexSet, Matrix};

/// One weight matrix plus its per-output bias.
///
/// Fully-connected layers store `W: n_in × n_out` with the bias indexed by
/// columns. Convolutional layers store the filter bank `m × c × f × f` as an
/// `m × (c·f·f)` matrix with the bias indexed by rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Element> Layer<T> {
    pub fn zeros_like(&self) -> Self {
        Layer { weight: Matrix::zeros(self.weight.rows(), self.weight.cols()), bias: vec![T::ZERO; self.bias.len()] }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

/// Uniform `±√(6 / (fan_in + fan_out))` weights and zero biases.
pub(crate) fn glorot_layer<T: Element>(
    rows: usize,
    cols: usize,
    bias_len: usize,
    fan_in: usize,
    fan_out: usize,
    seed: u64,
    layer: usize,
) -> Layer<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = Rng::for_stream(seed, Stream::Init { layer });
    let weight = Matrix::from_fn(rows, cols, |_, _| T::from_f64((2.0 * rng.uniform() - 1.0) * limit));
    Layer { weight, bias: vec![T::ZERO; bias_len] }
}

/// Entries of a parent [`Layer`] touched by a compact gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Active {
    /// Selected rows of the weight matrix.
    pub rows: IndexSet,
    /// Selected columns of the weight matrix.
    pub cols: IndexSet,
    /// Selected bias entries.
    pub outputs: IndexSet,
}

/// Gradient of the mean minibatch loss for one layer.
///
/// With `active == None` the gradient is full-size. Otherwise `weight` is
/// `|rows| × |cols|` and `bias` has `|outputs|` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub active: Option<Active>,
}

impl<T: Element> LayerGrad<T> {
    /// Expands a compact gradient into a full-size one (zeros elsewhere).
    pub fn to_dense(&self, rows: usize, cols: usize, bias_len: usize) -> LayerGrad<T> {
        match &self.active {
            None => self.clone(),
            Some(active) => {
                let mut weight = Matrix::zeros(rows, cols);
                for (r, i) in active.rows.iter().enumerate() {
                    for (c, j) in active.cols.iter().enumerate() {
                        weight.set(i, j, self.weight.get(r, c));
                    }
                }
                let mut bias = vec![T::ZERO; bias_len];
                for (k, o) in active.outputs.iter().enumerate() {
                    bias[o] = self.bias[k];
                }
                LayerGrad { weight, bias, active: None }
            }
        }
    }
}
