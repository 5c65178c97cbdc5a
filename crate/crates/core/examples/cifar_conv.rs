//! Batchwise dropout in a small convolutional net on CIFAR-10, trained on
//! random 24×24 crops with mirroring and tested on center crops.
//!
//! CIFAR_DIR=/path/to/cifar-10-batches-bin cargo run --release --example cifar_conv -- [epochs]

use batchwise_dropout::data::{center_crop, load_cifar10, Augment};
use batchwise_dropout::model::Path;
use batchwise_dropout::netconv::{ConvNet, ConvNetSpec};
use batchwise_dropout::optim::OptimizerConfig;
use batchwise_dropout::train::{env_threads, TrainSettings, Trainer};

fn main() -> batchwise_dropout::Result<()> {
    let Some(dir) = std::env::var_os("CIFAR_DIR").map(std::path::PathBuf::from) else {
        eprintln!("set CIFAR_DIR to the directory holding data_batch_1.bin .. test_batch.bin");
        std::process::exit(2);
    };
    let epochs: usize = std::env::args().nth(1).map_or(10, |a| a.parse().expect("epoch count"));
    let train = load_cifar10(&(1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect::<Vec<_>>())?;
    let test = center_crop(&load_cifar10(&[dir.join("test_batch.bin")])?, 24)?;

    let spec = ConvNetSpec::parse("32C5-MP2-50%-64C5-MP2-50%-256N-50%-10N", 3, 24)?;
    let mut settings = TrainSettings::new(Path::Batchwise, OptimizerConfig { rate: 0.02, ..OptimizerConfig::default() }, 100);
    settings.augment = Augment { hflip: true, crop: Some(24) };
    let mut trainer = Trainer::new(ConvNet::<f32>::new(spec, 1)?, settings, 1)?;
    trainer.set_eval_threads(env_threads());
    for _ in 0..epochs {
        let t = std::time::Instant::now();
        let stats = trainer.train_epoch(&train)?;
        println!(
            "epoch {:>3}  loss {:.4}  test {:>5.2}%  {:.0}s",
            stats.epoch + 1,
            stats.mean_loss,
            trainer.error_on(&test)?,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
