//! Batchwise dropout restricted to a fixed cycle of mask tuples. Short
//! cycles behave like training a few fixed subnetworks; long ones approach
//! unrestricted sampling.
//!
//! cargo run --release --example pattern_bank -- [epochs] [period...]

use batchwise_dropout::data::{gen_artificial, ArtificialSpec};
use batchwise_dropout::dropout::{make_pattern_bank, Rng};
use batchwise_dropout::model::Path;
use batchwise_dropout::netfc::{FcNet, NetSpec};
use batchwise_dropout::optim::OptimizerConfig;
use batchwise_dropout::train::{TrainSettings, Trainer};

fn main() -> batchwise_dropout::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(30, |a| a.parse().expect("epoch count"));
    let mut periods: Vec<Option<usize>> = args.map(|a| Some(a.parse().expect("period"))).collect();
    if periods.is_empty() {
        periods = vec![Some(1), Some(4), Some(16), Some(64), None];
    }

    let mut bank = make_pattern_bank(3, &[8, 6], &[0.5, 0.5], &mut Rng::new(0, 0))?;
    println!("a period-3 bank over two levels of widths 8 and 6:");
    for _ in 0..4 {
        let t = bank.cursor();
        let tuple = bank.next_tuple();
        let rows: Vec<String> = tuple.iter().map(|m| m.bits().iter().map(|&k| if k { '1' } else { '0' }).collect()).collect();
        println!("  step {t}: {}", rows.join(" "));
    }

    let spec = ArtificialSpec {
        classes: 10,
        dim: 100,
        walk_len: 100,
        flip: 0.4,
        train_per_class: 500,
        test_per_class: 100,
        seed: 1,
        exact_flips: false,
    };
    let (train, test) = gen_artificial(&spec)?;
    let net_spec = NetSpec::new(vec![100, 250, 250, 250, 10], vec![0.2, 0.5, 0.5, 0.5])?;
    let optimizer = OptimizerConfig { rate: 0.3, ..OptimizerConfig::default() };
    for period in periods {
        let mut settings = TrainSettings::new(Path::Batchwise, optimizer, 100);
        settings.pattern_period = period;
        let mut trainer = Trainer::new(FcNet::<f32>::new(net_spec.clone(), 1)?, settings, 1)?;
        for _ in 0..epochs {
            trainer.train_epoch(&train)?;
        }
        let label = period.map_or("unrestricted".to_string(), |p| format!("period {p}"));
        println!("{label:<13} train {:>5.1}%  test {:>5.1}%", trainer.error_on(&train)?, trainer.error_on(&test)?);
    }
    Ok(())
}
