//! Training on the kept submatrices computes the same loss, activations and
//! gradients as masking every sample with the replicated mask.

mod common;

use batchwise_dropout::dropout::Rng;
use batchwise_dropout::model::Path;
use batchwise_dropout::netfc::FcNet;
use batchwise_dropout::tensor::{Element, Matrix, Summation};
use common::{conv_triple, fc_triple, max3, random_fc_spec, random_labels, random_matrix};

fn sweep<T: Element>(tol: f64) {
    for summation in [Summation::Deterministic, Summation::Blocked] {
        let mut worst = (0.0, 0.0, 0.0);
        for seed in 0..70 {
            worst = max3(worst, fc_triple::<T>(seed, summation));
        }
        for seed in 0..40 {
            worst = max3(worst, conv_triple::<T>(seed, summation));
        }
        assert!(worst.0 <= tol && worst.1 <= tol && worst.2 <= tol, "{:?} {summation:?}: loss/activation/gradient differences {worst:?}", T::PRECISION);
    }
}

#[test]
fn batchwise_matches_replicated_masks_f32() {
    sweep::<f32>(1e-5);
}

#[test]
fn batchwise_matches_replicated_masks_f64() {
    sweep::<f64>(1e-11);
}

#[test]
fn no_dropout_paths_agree_exactly() {
    for seed in 0..20 {
        let mut rng = Rng::new(seed, 2);
        let spec = random_fc_spec(&mut rng);
        let net = FcNet::<f64>::new(spec.clone(), seed).unwrap();
        let x: Matrix<f64> = random_matrix(4, spec.widths[0], &mut rng);
        let labels = random_labels(4, *spec.widths.last().unwrap(), &mut rng);
        let none = vec![None; spec.layers()];
        let a = net.forward_train(&x, &labels, &none, Path::None).unwrap();
        let b = net.forward_train(&x, &labels, &none, Path::Independent).unwrap();
        let c = net.forward_train(&x, &labels, &none, Path::Batchwise).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.probs, c.probs);
    }
}
