//! Trains one network three ways on the random-walk dataset and prints
//! per-epoch test error and the multiplications spent.
//!
//! cargo run --release --example train_artificial -- [epochs]

use batchwise_dropout::data::{gen_artificial, ArtificialSpec};
use batchwise_dropout::model::Path;
use batchwise_dropout::netfc::{FcNet, NetSpec};
use batchwise_dropout::optim::OptimizerConfig;
use batchwise_dropout::train::{TrainSettings, Trainer};

fn main() -> batchwise_dropout::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(30, |a| a.parse().expect("epoch count"));
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
    println!("{} training and {} test samples, {} classes", train.len(), test.len(), train.classes);

    let widths = vec![100, 250, 250, 250, 10];
    let runs = [
        (Path::None, NetSpec::without_dropout(widths.clone())?),
        (Path::Independent, NetSpec::new(widths.clone(), vec![0.2, 0.5, 0.5, 0.5])?),
        (Path::Batchwise, NetSpec::new(widths, vec![0.2, 0.5, 0.5, 0.5])?),
    ];
    let optimizer = OptimizerConfig { rate: 0.3, ..OptimizerConfig::default() };
    for (path, net_spec) in runs {
        let net = FcNet::<f32>::new(net_spec, 7)?;
        let mut trainer = Trainer::new(net, TrainSettings::new(path, optimizer, 100), 7)?;
        let start = std::time::Instant::now();
        for _ in 0..epochs {
            let stats = trainer.train_epoch(&train)?;
            if (stats.epoch + 1) % 10 == 0 || stats.epoch + 1 == epochs {
                println!(
                    "{:<11} epoch {:>3}  loss {:.4}  train {:>5.1}%  test {:>5.1}%  mults {:.3e}",
                    path.to_string(),
                    stats.epoch + 1,
                    stats.mean_loss,
                    trainer.error_on(&train)?,
                    trainer.error_on(&test)?,
                    stats.mults as f64
                );
            }
        }
        println!("{path:<11} {:.1}s\n", start.elapsed().as_secs_f64());
    }
    Ok(())
}
