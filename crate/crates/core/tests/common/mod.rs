#![allow(dead_code)]

use batchwise_dropout::dropout::{broadcast_channels, replicate_rows, sample_batchwise_exact, DropoutMask, Rng};
use batchwise_dropout::model::{LevelShape, Network, Path};
use batchwise_dropout::netconv::{ConvNet, ConvNetSpec};
use batchwise_dropout::netfc::{FcNet, NetSpec};
use batchwise_dropout::optim::{nag_update_dense, update_all, OptimizerConfig, OptimizerState, Schedule};
use batchwise_dropout::params::{Layer, LayerGrad};
use batchwise_dropout::tensor::{gather_cols, gather_submatrix, gather_vec, Element, Matrix, Summation};

pub fn random_matrix<T: Element>(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::from_f64(2.0 * rng.uniform() - 1.0))
}

pub fn random_labels(b: usize, classes: usize, rng: &mut Rng) -> Vec<usize> {
    (0..b).map(|_| rng.below(0, classes)).collect()
}

/// Batchwise masks for every level with `p > 0` and the equivalent
/// per-sample masks (rows replicated, channels broadcast over the plane).
pub fn paired_masks(
    shapes: &[LevelShape],
    drop: &[f64],
    b: usize,
    rng: &mut Rng,
) -> (Vec<Option<DropoutMask>>, Vec<Option<DropoutMask>>) {
    let mut batchwise = Vec::new();
    let mut independent = Vec::new();
    for (shape, &p) in shapes.iter().zip(drop) {
        if p == 0.0 {
            batchwise.push(None);
            independent.push(None);
            continue;
        }
        let m = sample_batchwise_exact(shape.units, p, rng).unwrap();
        let wide = if shape.plane == 1 { replicate_rows(&m, b).unwrap() } else { broadcast_channels(&m, b, shape.plane).unwrap() };
        batchwise.push(Some(m));
        independent.push(Some(wide));
    }
    (batchwise, independent)
}

/// Largest absolute difference divided by the largest reference magnitude.
pub fn rel_diff<T: Element>(a: &[T], reference: &[T]) -> f64 {
    assert_eq!(a.len(), reference.len());
    let scale = reference.iter().map(|v| v.to_f64().abs()).fold(0.0, f64::max);
    let diff = a.iter().zip(reference).map(|(x, y)| (x.to_f64() - y.to_f64()).abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Gradients expanded to the shapes of the network's layers.
pub fn dense_grads<T: Element, N: Network<T>>(net: &N, grads: &[LayerGrad<T>]) -> Vec<LayerGrad<T>> {
    grads
        .iter()
        .zip(net.layers())
        .map(|(g, l)| g.to_dense(l.weight.rows(), l.weight.cols(), l.bias.len()))
        .collect()
}

/// Loss of one forward pass with fixed masks.
pub fn loss_at<N: Network<f64>>(net: &N, x: &Matrix<f64>, labels: &[usize], masks: &[Option<DropoutMask>], path: Path) -> f64 {
    N::trace_loss(&net.forward_train(x, labels, masks, path).unwrap())
}

/// `‖fd − g‖ / ‖fd + g‖` over every parameter, using central differences.
pub fn gradcheck<N: Network<f64>>(net: &mut N, x: &Matrix<f64>, labels: &[usize], masks: &[Option<DropoutMask>], path: Path) -> f64 {
    let h = 1e-5;
    let trace = net.forward_train(x, labels, masks, path).unwrap();
    let grads = dense_grads(net, &net.backward(&trace, labels).unwrap());
    drop(trace);
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..net.layers().len() {
        let (rows, cols) = net.layers()[k].weight.shape();
        for i in 0..rows {
            for j in 0..cols {
                let w0 = net.layers()[k].weight.get(i, j);
                net.layers_mut()[k].weight.set(i, j, w0 + h);
                let up = loss_at(net, x, labels, masks, path);
                net.layers_mut()[k].weight.set(i, j, w0 - h);
                let down = loss_at(net, x, labels, masks, path);
                net.layers_mut()[k].weight.set(i, j, w0);
                let fd = (up - down) / (2.0 * h);
                let g = grads[k].weight.get(i, j);
                num += (fd - g) * (fd - g);
                den += (fd + g) * (fd + g);
            }
        }
        for o in 0..net.layers()[k].bias.len() {
            let b0 = net.layers()[k].bias[o];
            net.layers_mut()[k].bias[o] = b0 + h;
            let up = loss_at(net, x, labels, masks, path);
            net.layers_mut()[k].bias[o] = b0 - h;
            let down = loss_at(net, x, labels, masks, path);
            net.layers_mut()[k].bias[o] = b0;
            let fd = (up - down) / (2.0 * h);
            let g = grads[k].bias[o];
            num += (fd - g) * (fd - g);
            den += (fd + g) * (fd + g);
        }
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

pub const DROPS: [f64; 5] = [0.0, 0.2, 0.5, 0.5, 0.8];

pub fn random_fc_spec(rng: &mut Rng) -> NetSpec {
    let levels = rng.below(2, 6);
    let widths: Vec<usize> = (0..levels).map(|_| rng.below(1, 13)).collect();
    let drop = (0..levels - 1).map(|_| DROPS[rng.below(0, DROPS.len())]).collect();
    NetSpec::new(widths, drop).unwrap()
}

pub fn random_conv_spec(rng: &mut Rng) -> ConvNetSpec {
    let archs = [
        ("8C3-MP2-{}-10N", 1, 8),
        ("4C3-{}-5C3-MP2-{}-6N", 2, 10),
        ("6C2-MP2-{}-3C2-{}-7N-{}-4N", 3, 9),
    ];
    let (arch, c, s) = archs[rng.below(0, archs.len())];
    let mut text = String::new();
    for (i, part) in arch.split("{}").enumerate() {
        if i > 0 {
            let p = [10, 25, 50, 75][rng.below(0, 4)];
            text.push_str(&format!("{p}%"));
        }
        text.push_str(part);
    }
    ConvNetSpec::parse(&text, c, s).unwrap()
}

/// Per-triple worst relative differences: (loss, activations, gradients).
pub type Diffs = (f64, f64, f64);

pub fn max3(a: Diffs, b: Diffs) -> Diffs {
    (a.0.max(b.0), a.1.max(b.1), a.2.max(b.2))
}

fn compare_grads<T: Element>(gb: &[LayerGrad<T>], gi: &[LayerGrad<T>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (cb, ci) in gb.iter().zip(gi) {
        let a = cb.active.as_ref().expect("batchwise gradients are compact");
        let w = gather_submatrix(&ci.weight, &a.rows, &a.cols).unwrap();
        worst = worst.max(rel_diff(cb.weight.as_slice(), w.as_slice()));
        worst = worst.max(rel_diff(&cb.bias, &gather_vec(&ci.bias, &a.outputs).unwrap()));
        // Outside the submatrix the per-sample gradient must vanish.
        let dense = cb.to_dense(ci.weight.rows(), ci.weight.cols(), ci.bias.len());
        worst = worst.max(rel_diff(dense.weight.as_slice(), ci.weight.as_slice()));
    }
    worst
}

pub fn fc_triple<T: Element>(seed: u64, summation: Summation) -> Diffs {
    let mut rng = Rng::new(seed, 0);
    let spec = random_fc_spec(&mut rng);
    let mut net = FcNet::<T>::new(spec.clone(), seed).unwrap();
    net.set_summation(summation);
    let b = rng.below(1, 9);
    let x: Matrix<T> = random_matrix(b, spec.widths[0], &mut rng);
    let labels = random_labels(b, *spec.widths.last().unwrap(), &mut rng);
    let (bw, ind) = paired_masks(&net.level_shapes(), &spec.drop, b, &mut rng);
    let tb = net.forward_train(&x, &labels, &bw, Path::Batchwise).unwrap();
    let ti = net.forward_train(&x, &labels, &ind, Path::Independent).unwrap();
    let loss = (tb.loss - ti.loss).abs() / ti.loss.abs().max(f64::MIN_POSITIVE);
    let mut act: f64 = rel_diff(tb.probs.as_slice(), ti.probs.as_slice());
    for k in 0..spec.layers() {
        act = act.max(rel_diff(tb.inputs[k].as_slice(), gather_cols(&ti.inputs[k], &tb.keep[k]).unwrap().as_slice()));
    }
    let grads = compare_grads(&net.backward(&tb, &labels).unwrap(), &net.backward(&ti, &labels).unwrap());
    (loss, act, grads)
}

pub fn conv_triple<T: Element>(seed: u64, summation: Summation) -> Diffs {
    let mut rng = Rng::new(seed, 1);
    let spec = random_conv_spec(&mut rng);
    let mut net = ConvNet::<T>::new(spec.clone(), seed).unwrap();
    net.set_summation(summation);
    let shapes = net.level_shapes();
    let b = rng.below(1, 5);
    let x: Matrix<T> = random_matrix(b, net.input_width(), &mut rng);
    let labels = random_labels(b, net.classes(), &mut rng);
    let (bw, ind) = paired_masks(&shapes, &spec.drop, b, &mut rng);
    let tb = net.forward_train(&x, &labels, &bw, Path::Batchwise).unwrap();
    let ti = net.forward_train(&x, &labels, &ind, Path::Independent).unwrap();
    let loss = (tb.loss - ti.loss).abs() / ti.loss.abs().max(f64::MIN_POSITIVE);
    let mut act: f64 = rel_diff(tb.probs.as_slice(), ti.probs.as_slice());
    for (k, shape) in shapes.iter().enumerate() {
        let full = ti.layer_input(k).unwrap();
        let kept = gather_cols(full, &tb.keep[k].expand(shape.plane)).unwrap();
        act = act.max(rel_diff(tb.layer_input(k).unwrap().as_slice(), kept.as_slice()));
    }
    let grads = compare_grads(&net.backward(&tb, &labels).unwrap(), &net.backward(&ti, &labels).unwrap());
    (loss, act, grads)
}

/// Draws `draws` exact-count masks of width `n`; returns whether every
/// popcount was `n − round(n·p)` and how often units 0 and 1 were both dropped.
pub fn exact_sampler_draws(n: usize, p: f64, draws: usize, seed: u64) -> (bool, f64) {
    use batchwise_dropout::dropout::dropped_count;
    let mut rng = Rng::new(seed, 3);
    let kept = n - dropped_count(n, p);
    let mut popcount_ok = true;
    let mut both = 0usize;
    for _ in 0..draws {
        let m = sample_batchwise_exact(n, p, &mut rng).unwrap();
        popcount_ok &= m.popcount() == kept;
        both += usize::from(!m.get(0, 0) && !m.get(0, 1));
    }
    (popcount_ok, both as f64 / draws as f64)
}

/// Chi-square p-values for uniformity of the dropped subset, one per
/// `(n, p)` with `n ≤ 6`.
pub fn subset_uniformity_pvalues(draws: usize, seed: u64) -> Vec<(usize, f64, f64)> {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    use std::collections::HashMap;
    let mut out = Vec::new();
    let mut rng = Rng::new(seed, 4);
    for n in 2..=6 {
        for p in [0.2, 0.5, 0.7] {
            let mut counts: HashMap<u32, usize> = HashMap::new();
            for _ in 0..draws {
                let m = sample_batchwise_exact(n, p, &mut rng).unwrap();
                let key = m.bits().iter().enumerate().fold(0u32, |acc, (i, &b)| acc | (u32::from(b) << i));
                *counts.entry(key).or_default() += 1;
            }
            let k = batchwise_dropout::dropout::dropped_count(n, p);
            let cells = binomial(n, k);
            if cells < 2 {
                continue;
            }
            assert_eq!(counts.len(), cells, "n={n} p={p}: {} distinct subsets", counts.len());
            let expected = draws as f64 / cells as f64;
            let stat: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
            let pvalue = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat);
            out.push((n, p, pvalue));
        }
    }
    out
}

pub fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// `P(both of two given units dropped)` for exact-count sampling.
pub fn pairwise_drop_probability(n: usize, p: f64) -> f64 {
    let d = batchwise_dropout::dropout::dropped_count(n, p) as f64;
    let n = n as f64;
    d / n * (d - 1.0) / (n - 1.0)
}

/// Zero biases put pre-activations exactly on the ReLU kink when a sample's
/// inputs are all dropped, where finite differences are meaningless.
pub fn randomize_biases<N: Network<f64>>(net: &mut N, rng: &mut Rng) {
    for layer in net.layers_mut() {
        for b in &mut layer.bias {
            *b = 0.2 * rng.uniform() - 0.1;
        }
    }
}

/// Finite-difference error on the three paths with paired masks.
pub fn gradcheck_paths<N: Network<f64>>(mut net: N, seed: u64) -> Vec<(Path, f64)> {
    let mut rng = Rng::new(seed, 7);
    randomize_biases(&mut net, &mut rng);
    let b = 3;
    let x = random_matrix(b, net.input_width(), &mut rng);
    let labels = random_labels(b, net.classes(), &mut rng);
    let drop = net.drop_probs().to_vec();
    let (bw, ind) = paired_masks(&net.level_shapes(), &drop, b, &mut rng);
    let none = vec![None; drop.len()];
    [(Path::None, &none), (Path::Independent, &ind), (Path::Batchwise, &bw)]
        .into_iter()
        .map(|(path, masks)| (path, gradcheck(&mut net, &x, &labels, masks, path)))
        .collect()
}

/// Fully-connected nets with two to four levels.
pub fn gradcheck_fc_specs() -> Vec<NetSpec> {
    [
        (vec![5, 3], vec![0.5]),
        (vec![6, 4, 3], vec![0.2, 0.5]),
        (vec![7, 6, 5, 4], vec![0.2, 0.5, 0.5]),
        (vec![4, 8, 8, 3], vec![0.0, 0.5, 0.25]),
    ]
    .into_iter()
    .map(|(w, d)| NetSpec::new(w, d).unwrap())
    .collect()
}

pub const GRADCHECK_CONV: [&str; 2] = ["8C3-MP2-10N", "8C3-MP2-50%-10N"];

/// Every gradient check: `(case, path, relative error)`.
pub fn gradcheck_suite() -> Vec<(String, Path, f64)> {
    let mut out = Vec::new();
    for (seed, spec) in gradcheck_fc_specs().into_iter().enumerate() {
        let name = format!("fc {:?}", spec.widths);
        for (path, err) in gradcheck_paths(FcNet::<f64>::new(spec, seed as u64).unwrap(), seed as u64) {
            out.push((name.clone(), path, err));
        }
    }
    for (seed, arch) in GRADCHECK_CONV.into_iter().enumerate() {
        let spec = ConvNetSpec::parse(arch, 1, 8).unwrap();
        for (path, err) in gradcheck_paths(ConvNet::<f64>::new(spec, seed as u64).unwrap(), seed as u64) {
            out.push((arch.to_string(), path, err));
        }
    }
    out
}

fn optimizer_step<N: Network<f64>>(net: &mut N, opt: &mut OptimizerState<f64>, cfg: &OptimizerConfig, path: Path, rng: &mut Rng) -> Vec<LayerGrad<f64>> {
    let b = 4;
    let x = random_matrix(b, net.input_width(), rng);
    let labels = random_labels(b, net.classes(), rng);
    let masks: Vec<Option<DropoutMask>> = match path {
        Path::Batchwise => net
            .level_shapes()
            .iter()
            .zip(net.drop_probs())
            .map(|(s, &p)| (p > 0.0).then(|| sample_batchwise_exact(s.units, p, rng).unwrap()))
            .collect(),
        _ => vec![None; net.drop_probs().len()],
    };
    let trace = net.forward_train(&x, &labels, &masks, path).unwrap();
    let grads = net.backward(&trace, &labels).unwrap();
    drop(trace);
    update_all(net.layers_mut(), opt, &grads, cfg, 0).unwrap();
    grads
}

/// Runs dense warm-up steps, then batchwise steps, checking after each one
/// that entries outside the selection kept their exact bits and entries
/// inside match a dense update with the same gradient.
pub fn check_locality<N: Network<f64>>(mut net: N, seed: u64, steps: usize) -> Result<(), String> {
    let mut rng = Rng::new(seed, 9);
    let cfg = OptimizerConfig { rate: 0.05, momentum: 0.9, schedule: Schedule::Constant, compensate_momentum: false };
    let mut opt = OptimizerState::new(net.layers());
    for _ in 0..2 {
        optimizer_step(&mut net, &mut opt, &cfg, Path::None, &mut rng);
    }
    for _ in 0..steps {
        let before: Vec<Layer<f64>> = net.layers().to_vec();
        let vel_before = opt.velocity.clone();
        let grads = optimizer_step(&mut net, &mut opt, &cfg, Path::Batchwise, &mut rng);
        for (k, g) in grads.iter().enumerate() {
            let a = g.active.as_ref().ok_or("dense gradient on the batchwise path")?;
            let (w0, v0) = (&before[k], &vel_before[k]);
            let (w1, v1) = (&net.layers()[k], &opt.velocity[k]);
            let dense = g.to_dense(w0.weight.rows(), w0.weight.cols(), w0.bias.len());
            let (mut wd, mut vd) = (w0.weight.clone(), v0.weight.clone());
            nag_update_dense(&mut wd, &mut vd, &dense.weight, cfg.rate, cfg.momentum).unwrap();
            for i in 0..w0.weight.rows() {
                for j in 0..w0.weight.cols() {
                    let inside = a.rows.contains(i) && a.cols.contains(j);
                    let (we, ve) = if inside { (wd.get(i, j), vd.get(i, j)) } else { (w0.weight.get(i, j), v0.weight.get(i, j)) };
                    if w1.weight.get(i, j).to_bits() != we.to_bits() || v1.weight.get(i, j).to_bits() != ve.to_bits() {
                        return Err(format!("layer {k} entry ({i}, {j}), inside selection: {inside}"));
                    }
                }
            }
            for o in (0..w0.bias.len()).filter(|&o| !a.outputs.contains(o)) {
                if w1.bias[o].to_bits() != w0.bias[o].to_bits() || v1.bias[o].to_bits() != v0.bias[o].to_bits() {
                    return Err(format!("layer {k} bias {o}"));
                }
            }
        }
    }
    Ok(())
}
