//! A small convolutional net on synthetic 12×12 images (one noisy template
//! per class), trained with batchwise dropout on whole feature maps.
//!
//! cargo run --release --example conv_shapes -- [epochs]

use batchwise_dropout::data::{Dataset, Geometry};
use batchwise_dropout::dropout::Rng;
use batchwise_dropout::model::{Network, Path};
use batchwise_dropout::netconv::{ConvNet, ConvNetSpec};
use batchwise_dropout::optim::OptimizerConfig;
use batchwise_dropout::tensor::Matrix;
use batchwise_dropout::train::{TrainSettings, Trainer};

const SIDE: usize = 12;

fn make_split(templates: &[Vec<f32>], per_class: usize, rng: &mut Rng) -> batchwise_dropout::Result<Dataset> {
    let n = templates.len() * per_class;
    let mut labels = Vec::with_capacity(n);
    let samples = Matrix::from_fn(n, SIDE * SIDE, |i, j| {
        let class = i % templates.len();
        if j == 0 {
            labels.push(class);
        }
        let noise = (rng.uniform() as f32 - 0.5) * 1.2;
        (templates[class][j] + noise).clamp(0.0, 1.0)
    });
    Dataset::new(samples, labels, templates.len(), Some(Geometry { channels: 1, side: SIDE }))
}

fn main() -> batchwise_dropout::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(15, |a| a.parse().expect("epoch count"));
    let mut rng = Rng::new(3, 0);
    let templates: Vec<Vec<f32>> = (0..10).map(|_| (0..SIDE * SIDE).map(|_| if rng.bernoulli(0.3) { 1.0 } else { 0.0 }).collect()).collect();
    let train = make_split(&templates, 200, &mut rng)?;
    let test = make_split(&templates, 50, &mut rng)?;

    let spec = ConvNetSpec::parse("16C3-MP2-50%-32C3-50%-64N-50%-10N", 1, SIDE)?;
    println!("{spec}: levels {:?}", ConvNet::<f32>::new(spec.clone(), 0)?.level_shapes());
    for path in [Path::Independent, Path::Batchwise] {
        let net = ConvNet::<f32>::new(spec.clone(), 5)?;
        let optimizer = OptimizerConfig { rate: 0.05, ..OptimizerConfig::default() };
        let mut trainer = Trainer::new(net, TrainSettings::new(path, optimizer, 50), 5)?;
        let start = std::time::Instant::now();
        for _ in 0..epochs {
            trainer.train_epoch(&train)?;
        }
        println!(
            "{path:<11} {epochs} epochs in {:.1}s: test error {:.1}%, {:.3e} multiplications",
            start.elapsed().as_secs_f64(),
            trainer.error_on(&test)?,
            trainer.mults() as f64
        );
    }
    Ok(())
}
