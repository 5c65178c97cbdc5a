//! Pieces shared by every network type: the execution path selector, the
//! softmax/negative log-likelihood head, and the [`Network`] trait the
//! training loop is written against.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dropout::DropoutMask;
use crate::error::{Error, Result};
use crate::params::{Layer, LayerGrad};
use crate::tensor::{Element, Matrix};

/// How dropout is executed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    /// No dropout; masks are ignored.
    None,
    /// Full-width products with a per-sample mask multiplied in.
    Independent,
    /// One mask per minibatch; only the kept submatrix is computed.
    Batchwise,
}

impl Path {
    pub const ALL: [Path; 3] = [Path::None, Path::Independent, Path::Batchwise];

    pub fn name(self) -> &'static str {
        match self {
            Path::None => "none",
            Path::Independent => "independent",
            Path::Batchwise => "batchwise",
        }
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Path {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Path::None),
            "independent" => Ok(Path::Independent),
            "batchwise" => Ok(Path::Batchwise),
            other => Err(Error::Config(format!("unknown path {other:?}"))),
        }
    }
}

/// Geometry of a droppable level: `units` maskable units, each owning
/// `plane` activations (1 for fully-connected levels, `s²` for feature maps).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelShape {
    pub units: usize,
    pub plane: usize,
}

/// Operations the training loop needs from a network.
pub trait Network<T: Element> {
    type Trace;

    fn drop_probs(&self) -> &[f64];
    /// Shapes of the levels that may carry a dropout mask (all but the output).
    fn level_shapes(&self) -> Vec<LevelShape>;
    fn input_width(&self) -> usize;
    fn classes(&self) -> usize;

    fn forward_train(
        &self,
        x: &Matrix<T>,
        labels: &[usize],
        masks: &[Option<DropoutMask>],
        path: Path,
    ) -> Result<Self::Trace>;
    fn trace_loss(trace: &Self::Trace) -> f64;
    fn trace_probs(trace: &Self::Trace) -> &Matrix<T>;
    fn backward(&self, trace: &Self::Trace, labels: &[usize]) -> Result<Vec<LayerGrad<T>>>;

    /// Mask-free forward pass with test-time scaling; returns class probabilities.
    fn forward_eval(&self, x: &Matrix<T>) -> Result<Matrix<T>>;

    fn layers(&self) -> &[Layer<T>];
    fn layers_mut(&mut self) -> &mut [Layer<T>];

    /// Scalar multiplications spent by one forward+backward pass.
    fn mult_count(&self, b: usize, path: Path, masks: &[Option<DropoutMask>]) -> u128;
}

/// Row-wise softmax and the mean negative log-likelihood of `labels`.
pub(crate) fn softmax_nll<T: Element>(logits: &Matrix<T>, labels: &[usize]) -> Result<(Matrix<T>, f64)> {
    if labels.len() != logits.rows() {
        return Err(Error::shape("softmax_nll", format!("{} labels for {} rows", labels.len(), logits.rows())));
    }
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= logits.cols() {
            return Err(Error::shape("softmax_nll", format!("label {label} with {} classes", logits.cols())));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
        let out = probs.row_mut(i);
        let mut sum = T::ZERO;
        for (o, &z) in out.iter_mut().zip(row) {
            *o = (z - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o = *o / sum;
        }
        total -= (row[label] - max).to_f64() - sum.to_f64().ln();
    }
    let loss = total / labels.len().max(1) as f64;
    if !loss.is_finite() || !probs.is_finite() {
        return Err(Error::NonFinite("softmax"));
    }
    Ok((probs, loss))
}

pub(crate) fn softmax<T: Element>(logits: &Matrix<T>) -> Matrix<T> {
    let mut probs = logits.clone();
    for i in 0..probs.rows() {
        let row = probs.row_mut(i);
        if row.is_empty() {
            continue;
        }
        let max = row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
        let mut sum = T::ZERO;
        for z in row.iter_mut() {
            *z = (*z - max).exp();
            sum += *z;
        }
        for z in row.iter_mut() {
            *z = *z / sum;
        }
    }
    probs
}

/// Gradient of the mean NLL with respect to the logits: `(p − onehot) / b`.
pub(crate) fn output_delta<T: Element>(probs: &Matrix<T>, labels: &[usize]) -> Matrix<T> {
    let inv_b = T::ONE / T::from_f64(labels.len().max(1) as f64);
    let mut delta = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        let row = delta.row_mut(i);
        row[label] -= T::ONE;
        for d in row.iter_mut() {
            *d = *d * inv_b;
        }
    }
    delta
}

pub(crate) fn relu_in_place<T: Element>(x: &mut [T]) {
    for v in x {
        if !(*v > T::ZERO) {
            *v = T::ZERO;
        }
    }
}

/// Zeroes `grad` wherever the pre-activation was not positive.
pub(crate) fn relu_backward<T: Element>(grad: &mut [T], pre: &[T]) {
    for (g, &z) in grad.iter_mut().zip(pre) {
        if !(z > T::ZERO) {
            *g = T::ZERO;
        }
    }
}

/// Index of the largest entry in each row.
pub fn argmax_rows<T: Element>(m: &Matrix<T>) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Percentage of rows whose argmax differs from the label.
pub fn error_percent<T: Element>(probs: &Matrix<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = argmax_rows(probs).iter().zip(labels).filter(|(p, l)| p != l).count();
    100.0 * wrong as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_delta_is_probabilities_minus_one_hot_over_b() {
        let logits = Matrix::from_rows(&[&[1.0f64, 2.0, 0.5], &[0.0, 0.0, 0.0]]);
        let (probs, loss) = softmax_nll(&logits, &[1, 2]).unwrap();
        let delta = output_delta(&probs, &[1, 2]);
        for i in 0..2 {
            for j in 0..3 {
                let onehot = if j == [1, 2][i] { 1.0 } else { 0.0 };
                assert!((delta.get(i, j) - (probs.get(i, j) - onehot) / 2.0).abs() < 1e-15);
            }
        }
        let expected = (-(probs.get(0, 1).ln()) - probs.get(1, 2).ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_survive_large_logits() {
        let logits = Matrix::from_rows(&[&[1000.0f32, 999.0, -1000.0]]);
        let (probs, loss) = softmax_nll(&logits, &[0]).unwrap();
        assert!((probs.row(0).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(loss.is_finite());
        assert_eq!(softmax(&logits), probs);
    }

    #[test]
    fn relu_order_is_immaterial_for_dropped_units() {
        // Zeroing a unit before or after the rectifier gives the same value.
        for z in [-2.0f64, -0.0, 0.0, 3.5] {
            let mut before = [0.0 * z];
            relu_in_place(&mut before);
            let mut after = [z];
            relu_in_place(&mut after);
            after[0] = 0.0;
            assert_eq!(before[0], after[0]);
        }
    }

    #[test]
    fn error_percent_counts_argmax_misses() {
        let probs = Matrix::from_rows(&[&[0.1f32, 0.9], &[0.8, 0.2], &[0.4, 0.6]]);
        assert!((error_percent(&probs, &[1, 1, 1]) - 100.0 / 3.0).abs() < 1e-12);
    }
}
