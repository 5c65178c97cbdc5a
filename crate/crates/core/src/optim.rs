//! Momentum SGD in the form
//!
//! ```text
//! v ← μ·v − ε(1 − μ)·∂cost/∂W
//! W ← W + v
//! ```
//!
//! On the batchwise path the update touches only the active submatrix of
//! `W` and `v`; everything else keeps its exact bits, including momentum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Active, Layer, LayerGrad};
use crate::tensor::{Element, IndexSet, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// `rate = a · exp(−b · epoch)`.
    Annealed { a: f64, b: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Learning rate ε for the constant schedule.
    pub rate: f64,
    /// Momentum decay μ.
    pub momentum: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    /// Raise μ on partially active layers so the per-step decay of a
    /// selected momentum entry matches the dense optimizer.
    #[serde(default)]
    pub compensate_momentum: bool,
}

fn default_schedule() -> Schedule {
    Schedule::Constant
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { rate: 0.1, momentum: 0.9, schedule: Schedule::Constant, compensate_momentum: false }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let rate_ok = match self.schedule {
            Schedule::Constant => self.rate > 0.0 && self.rate.is_finite(),
            Schedule::Annealed { a, b } => a > 0.0 && a.is_finite() && b.is_finite(),
        };
        if !rate_ok {
            return Err(Error::Config("learning rate must be positive and finite".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

pub fn schedule_rate(config: &OptimizerConfig, epoch: usize) -> f64 {
    match config.schedule {
        Schedule::Constant => config.rate,
        Schedule::Annealed { a, b } => a * (-b * epoch as f64).exp(),
    }
}

/// Momentum buffers congruent with the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Layer<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(layers: &[Layer<T>]) -> Self {
        OptimizerState { velocity: layers.iter().map(Layer::zeros_like).collect() }
    }
}

#[inline]
fn step<T: Element>(w: &mut T, v: &mut T, g: T, mu: T, scale: T) {
    *v = mu * *v - scale * g;
    *w += *v;
}

/// Updates only the entries `(rows[i], cols[j])` of `w` and `v`.
pub fn nag_update_submatrix<T: Element>(
    w: &mut Matrix<T>,
    v: &mut Matrix<T>,
    grad: &Matrix<T>,
    rows: &IndexSet,
    cols: &IndexSet,
    rate: f64,
    momentum: f64,
) -> Result<()> {
    if w.shape() != v.shape() {
        return Err(Error::shape("nag_update_submatrix", "weight and momentum differ in shape"));
    }
    if rows.parent() != w.rows() || cols.parent() != w.cols() || grad.shape() != (rows.len(), cols.len()) {
        return Err(Error::shape(
            "nag_update_submatrix",
            format!("gradient {:?} for a {}x{} selection of {:?}", grad.shape(), rows.len(), cols.len(), w.shape()),
        ));
    }
    let mu = T::from_f64(momentum);
    let scale = T::from_f64(rate * (1.0 - momentum));
    let width = w.cols();
    let (wd, vd) = (w.as_mut_slice(), v.as_mut_slice());
    for (r, i) in rows.iter().enumerate() {
        let base = i * width;
        for (&g, j) in grad.row(r).iter().zip(cols.iter()) {
            step(&mut wd[base + j], &mut vd[base + j], g, mu, scale);
        }
    }
    Ok(())
}

/// The same update applied to every entry.
pub fn nag_update_dense<T: Element>(
    w: &mut Matrix<T>,
    v: &mut Matrix<T>,
    grad: &Matrix<T>,
    rate: f64,
    momentum: f64,
) -> Result<()> {
    if w.shape() != v.shape() || w.shape() != grad.shape() {
        return Err(Error::shape("nag_update_dense", format!("{:?} / {:?} / {:?}", w.shape(), v.shape(), grad.shape())));
    }
    let mu = T::from_f64(momentum);
    let scale = T::from_f64(rate * (1.0 - momentum));
    for ((wi, vi), &g) in w.as_mut_slice().iter_mut().zip(v.as_mut_slice()).zip(grad.as_slice()) {
        step(wi, vi, g, mu, scale);
    }
    Ok(())
}

fn update_bias<T: Element>(b: &mut [T], v: &mut [T], g: &[T], outputs: Option<&IndexSet>, rate: f64, momentum: f64) -> Result<()> {
    let mu = T::from_f64(momentum);
    let scale = T::from_f64(rate * (1.0 - momentum));
    match outputs {
        None => {
            if g.len() != b.len() {
                return Err(Error::shape("bias update", format!("{} gradients for {} biases", g.len(), b.len())));
            }
            for ((bi, vi), &gi) in b.iter_mut().zip(v.iter_mut()).zip(g) {
                step(bi, vi, gi, mu, scale);
            }
        }
        Some(set) => {
            if g.len() != set.len() || set.parent() != b.len() {
                return Err(Error::shape("bias update", format!("{} gradients for {} active biases", g.len(), set.len())));
            }
            for (&gi, o) in g.iter().zip(set.iter()) {
                step(&mut b[o], &mut v[o], gi, mu, scale);
            }
        }
    }
    Ok(())
}

/// Momentum that makes `active_fraction` updates per step decay like one
/// dense update: `μ^(1/q)`.
pub fn compensated_momentum(momentum: f64, active_fraction: f64) -> f64 {
    if active_fraction <= 0.0 || active_fraction >= 1.0 {
        momentum
    } else {
        momentum.powf(1.0 / active_fraction)
    }
}

/// Applies one optimizer step to every layer.
///
/// Compact gradients (those carrying an [`Active`] selection) update their
/// submatrix and the matching biases; full-size gradients update densely.
pub fn update_all<T: Element>(
    layers: &mut [Layer<T>],
    state: &mut OptimizerState<T>,
    grads: &[LayerGrad<T>],
    config: &OptimizerConfig,
    epoch: usize,
) -> Result<()> {
    if layers.len() != grads.len() || layers.len() != state.velocity.len() {
        return Err(Error::shape(
            "update_all",
            format!("{} layers, {} gradients, {} momentum buffers", layers.len(), grads.len(), state.velocity.len()),
        ));
    }
    let rate = schedule_rate(config, epoch);
    for ((layer, vel), grad) in layers.iter_mut().zip(state.velocity.iter_mut()).zip(grads) {
        match &grad.active {
            None => {
                nag_update_dense(&mut layer.weight, &mut vel.weight, &grad.weight, rate, config.momentum)?;
                update_bias(&mut layer.bias, &mut vel.bias, &grad.bias, None, rate, config.momentum)?;
            }
            Some(Active { rows, cols, outputs }) => {
                let momentum = if config.compensate_momentum {
                    let q = (rows.len() as f64 / rows.parent().max(1) as f64) * (cols.len() as f64 / cols.parent().max(1) as f64);
                    compensated_momentum(config.momentum, q)
                } else {
                    config.momentum
                };
                nag_update_submatrix(&mut layer.weight, &mut vel.weight, &grad.weight, rows, cols, rate, momentum)?;
                let bias_momentum = if config.compensate_momentum {
                    compensated_momentum(config.momentum, outputs.len() as f64 / outputs.parent().max(1) as f64)
                } else {
                    config.momentum
                };
                update_bias(&mut layer.bias, &mut vel.bias, &grad.bias, Some(outputs), rate, bias_momentum)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout::Rng;

    fn random(rng: &mut Rng, rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform() * 2.0 - 1.0)
    }

    fn set(indices: &[usize], parent: usize) -> IndexSet {
        IndexSet::new(indices.to_vec(), parent).unwrap()
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut rng = Rng::new(1, 0);
        let w0 = random(&mut rng, 4, 5);
        let mut w = w0.clone();
        let mut v = Matrix::zeros(4, 5);
        let rows = set(&[0, 3], 4);
        let cols = set(&[1, 2, 4], 5);
        let g = random(&mut rng, 2, 3);
        nag_update_submatrix(&mut w, &mut v, &g, &rows, &cols, 0.05, 0.0).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                if let (Some(r), Some(c)) = (rows.as_slice().iter().position(|&x| x == i), cols.as_slice().iter().position(|&x| x == j)) {
                    assert_eq!(w.get(i, j), w0.get(i, j) - 0.05 * g.get(r, c));
                    assert_eq!(v.get(i, j), -(0.05 * g.get(r, c)));
                } else {
                    assert_eq!(w.get(i, j).to_bits(), w0.get(i, j).to_bits());
                    assert_eq!(v.get(i, j).to_bits(), 0.0f64.to_bits());
                }
            }
        }
    }

    #[test]
    fn single_entry_arithmetic() {
        let mut w = Matrix::<f64>::filled(2, 2, 1.0);
        let mut v = Matrix::zeros(2, 2);
        let g = Matrix::from_rows(&[&[1.0]]);
        nag_update_submatrix(&mut w, &mut v, &g, &set(&[1], 2), &set(&[0], 2), 0.1, 0.9).unwrap();
        assert!((v.get(1, 0) + 0.01).abs() < 1e-15);
        assert!((w.get(1, 0) - 0.99).abs() < 1e-15);
        assert_eq!(w.get(0, 0), 1.0);
    }

    #[test]
    fn full_selection_equals_dense() {
        let mut rng = Rng::new(2, 0);
        let w0 = random(&mut rng, 3, 4);
        let v0 = random(&mut rng, 3, 4);
        let g = random(&mut rng, 3, 4);
        let (mut w1, mut v1) = (w0.clone(), v0.clone());
        nag_update_submatrix(&mut w1, &mut v1, &g, &IndexSet::all(3), &IndexSet::all(4), 0.3, 0.7).unwrap();
        let (mut w2, mut v2) = (w0.clone(), v0.clone());
        nag_update_dense(&mut w2, &mut v2, &g, 0.3, 0.7).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(v1, v2);
        // dense oracle written out directly
        for i in 0..3 {
            for j in 0..4 {
                let v = 0.7 * v0.get(i, j) - 0.3 * (1.0 - 0.7) * g.get(i, j);
                assert_eq!(v1.get(i, j), v);
                assert_eq!(w1.get(i, j), w0.get(i, j) + v);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let mut w = Matrix::<f32>::zeros(2, 2);
        let mut v = Matrix::zeros(2, 2);
        let g = Matrix::zeros(2, 2);
        assert!(nag_update_submatrix(&mut w, &mut v, &g, &set(&[0], 2), &set(&[0], 2), 0.1, 0.9).is_err());
        assert!(nag_update_dense(&mut w, &mut v, &Matrix::zeros(1, 2), 0.1, 0.9).is_err());
    }

    #[test]
    fn schedules() {
        let annealed = OptimizerConfig { schedule: Schedule::Annealed { a: 0.01, b: 0.01 }, ..Default::default() };
        assert_eq!(schedule_rate(&annealed, 0), 0.01);
        assert!((schedule_rate(&annealed, 100) - 0.01 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((schedule_rate(&annealed, 100) - 0.003679).abs() < 5e-7);
        let constant = OptimizerConfig { rate: 0.2, ..Default::default() };
        assert_eq!(schedule_rate(&constant, 0), schedule_rate(&constant, 1000));
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(OptimizerConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { rate: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn disjoint_steps_leave_earlier_momentum_alone() {
        let mut rng = Rng::new(3, 0);
        let mut layers = vec![Layer { weight: random(&mut rng, 4, 4), bias: vec![0.0; 4] }];
        let mut state = OptimizerState::new(&layers);
        let cfg = OptimizerConfig { rate: 0.1, momentum: 0.9, ..Default::default() };
        let first = Active { rows: set(&[0, 1], 4), cols: set(&[0, 1], 4), outputs: set(&[0, 1], 4) };
        let second = Active { rows: set(&[2, 3], 4), cols: set(&[2, 3], 4), outputs: set(&[2, 3], 4) };
        let g = LayerGrad { weight: Matrix::filled(2, 2, 1.0), bias: vec![1.0; 2], active: Some(first) };
        update_all(&mut layers, &mut state, &[g.clone()], &cfg, 0).unwrap();
        let after_first = state.clone();
        let g2 = LayerGrad { active: Some(second), ..g };
        update_all(&mut layers, &mut state, &[g2], &cfg, 0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(state.velocity[0].weight.get(i, j).to_bits(), after_first.velocity[0].weight.get(i, j).to_bits());
            }
            assert_eq!(state.velocity[0].bias[i], after_first.velocity[0].bias[i]);
        }
    }

    #[test]
    fn compensation() {
        assert_eq!(compensated_momentum(0.9, 1.0), 0.9);
        assert!((compensated_momentum(0.9, 0.25).powf(0.25) - 0.9).abs() < 1e-12);
    }
}
