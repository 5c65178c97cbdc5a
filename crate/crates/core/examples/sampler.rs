//! Exact-count versus Bernoulli dropout masks: kept-unit counts, their
//! spread, and how often two given units are dropped together.
//!
//! cargo run --release --example sampler -- [n] [p] [draws]

use batchwise_dropout::dropout::{dropped_count, sample_batchwise_bernoulli, sample_batchwise_exact, Rng};

fn main() -> batchwise_dropout::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(2000, |a| a.parse().expect("width"));
    let p: f64 = args.next().map_or(0.5, |a| a.parse().expect("probability"));
    let draws: usize = args.next().map_or(100_000, |a| a.parse().expect("draw count"));

    let mut rng = Rng::new(1, 0);
    for (name, exact) in [("exact-count", true), ("bernoulli", false)] {
        let (mut sum, mut sq, mut both) = (0.0, 0.0, 0usize);
        for _ in 0..draws {
            let m = if exact { sample_batchwise_exact(n, p, &mut rng)? } else { sample_batchwise_bernoulli(n, p, &mut rng)? };
            let kept = m.popcount() as f64;
            sum += kept;
            sq += kept * kept;
            both += usize::from(!m.get(0, 0) && !m.get(0, 1));
        }
        let mean = sum / draws as f64;
        let var = sq / draws as f64 - mean * mean;
        println!("{name:<12} kept mean {mean:.2}  variance {var:.3}  P(units 0 and 1 dropped) {:.5}", both as f64 / draws as f64);
    }
    let d = dropped_count(n, p) as f64;
    println!("exact-count theory: kept {} always, pair {:.5}", n as f64 - d, d / n as f64 * (d - 1.0) / (n as f64 - 1.0));
    println!("bernoulli theory:   kept {:.2} ± {:.2}, pair {:.5}", n as f64 * (1.0 - p), (n as f64 * p * (1.0 - p)).sqrt(), p * p);
    Ok(())
}
