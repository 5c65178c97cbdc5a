//! Central finite differences against backpropagation on every path, in f64.

use batchwise_dropout::dropout::{replicate_rows, sample_batchwise_exact, DropoutMask, Rng};
use batchwise_dropout::model::Path;
use batchwise_dropout::netfc::{FcNet, NetSpec};
use batchwise_dropout::tensor::Matrix;

fn loss(net: &FcNet<f64>, x: &Matrix<f64>, y: &[usize], masks: &[Option<DropoutMask>], path: Path) -> f64 {
    net.forward_train(x, y, masks, path).unwrap().loss
}

fn main() -> batchwise_dropout::Result<()> {
    let spec = NetSpec::new(vec![6, 7, 5, 3], vec![0.2, 0.5, 0.5])?;
    let mut net = FcNet::<f64>::new(spec.clone(), 2)?;
    let mut rng = Rng::new(2, 0);
    for layer in net.layers_mut() {
        layer.bias.iter_mut().for_each(|b| *b = 0.1 * rng.uniform());
    }
    let b = 4;
    let x = Matrix::from_fn(b, 6, |_, _| 2.0 * rng.uniform() - 1.0);
    let y: Vec<usize> = (0..b).map(|_| rng.below(0, 3)).collect();
    let shared: Vec<_> = spec.widths.iter().zip(&spec.drop).map(|(&n, &p)| sample_batchwise_exact(n, p, &mut rng)).collect::<Result<_, _>>()?;
    let batchwise: Vec<_> = shared.iter().cloned().map(Some).collect();
    let independent: Vec<_> = shared.iter().map(|m| replicate_rows(m, b).map(Some)).collect::<Result<_, _>>()?;
    let none = vec![None; 3];

    let h = 1e-5;
    for (path, masks) in [(Path::None, &none), (Path::Independent, &independent), (Path::Batchwise, &batchwise)] {
        let trace = net.forward_train(&x, &y, masks, path)?;
        let grads = net.backward(&trace, &y)?;
        drop(trace);
        let (mut num, mut den, mut worst) = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..3 {
            let (rows, cols) = net.layers()[k].weight.shape();
            let dense = grads[k].to_dense(rows, cols, cols);
            for i in 0..rows {
                for j in 0..cols {
                    let w = net.layers()[k].weight.get(i, j);
                    net.layers_mut()[k].weight.set(i, j, w + h);
                    let up = loss(&net, &x, &y, masks, path);
                    net.layers_mut()[k].weight.set(i, j, w - h);
                    let down = loss(&net, &x, &y, masks, path);
                    net.layers_mut()[k].weight.set(i, j, w);
                    let fd = (up - down) / (2.0 * h);
                    let g = dense.weight.get(i, j);
                    num += (fd - g).powi(2);
                    den += (fd + g).powi(2);
                    worst = worst.max((fd - g).abs());
                }
            }
        }
        println!("{:<11} relative error {:.3e}  worst absolute {:.3e}", path.to_string(), (num / den).sqrt(), worst);
    }
    Ok(())
}
