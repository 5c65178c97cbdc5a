//! Multiplication counts for one minibatch on each path, per layer.
//!
//! cargo run --example flop_model -- [batch]

use batchwise_dropout::bench::{mult_count, KeptSource};
use batchwise_dropout::model::Path;

fn main() {
    let b: usize = std::env::args().nth(1).map_or(100, |a| a.parse().expect("batch size"));
    let nets: [(&[usize], &[f64]); 4] = [
        (&[784, 800], &[0.0]),
        (&[784, 800, 800, 10], &[0.2, 0.5, 0.5]),
        (&[784, 1000, 1000, 1000, 10], &[0.2, 0.5, 0.5, 0.5]),
        (&[1000, 2000, 2000, 2000, 100], &[0.5, 0.5, 0.5, 0.5]),
    ];
    for (widths, drop) in nets {
        let dense = mult_count(widths, b, Path::None, KeptSource::Expected(drop));
        let bw = mult_count(widths, b, Path::Batchwise, KeptSource::Expected(drop));
        println!("{widths:?} drop {drop:?}, b = {b}");
        for (k, (d, s)) in dense.layers.iter().zip(&bw.layers).enumerate() {
            println!(
                "  layer {k}: dense {:>13}  batchwise {:>13}  ({:.2}%)",
                d.total(),
                s.total(),
                100.0 * s.total() as f64 / d.total() as f64
            );
        }
        println!(
            "  total:   dense {:>13}  batchwise {:>13}  ({:.2}%)\n",
            dense.total(),
            bw.total(),
            100.0 * bw.total() as f64 / dense.total() as f64
        );
    }
}
