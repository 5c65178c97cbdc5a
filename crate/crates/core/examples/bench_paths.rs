//! Times the no-dropout, independent and batchwise paths on a
//! 784-1000-1000-1000-10 network, next to a half-width no-dropout network.
//!
//! cargo run --release --example bench_paths -- [trials] [batches]

use batchwise_dropout::bench::{time_workloads, TimingOptions, Workload};
use batchwise_dropout::model::Path;
use batchwise_dropout::netfc::NetSpec;

fn main() -> batchwise_dropout::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let trials = args.next().unwrap_or(5);
    let batches = args.next().unwrap_or(10);

    let spec = NetSpec::new(vec![784, 1000, 1000, 1000, 10], vec![0.0, 0.5, 0.5, 0.5])?;
    let half = spec.halved_hidden();
    let mut workloads: Vec<Workload> =
        Path::ALL.iter().map(|&path| Workload { label: "full".into(), spec: spec.clone(), path }).collect();
    workloads.push(Workload { label: "half".into(), spec: half, path: Path::None });

    let opts = TimingOptions { trials, batches, ..TimingOptions::default() };
    let report = time_workloads::<f32>(&workloads, &opts)?;
    print!("{}", report.table());
    let saving = report.saving(("full", Path::Batchwise), ("full", Path::Independent)).unwrap();
    let vs_half = report.saving(("full", Path::Batchwise), ("half", Path::None)).unwrap();
    println!("batchwise vs independent: {:.1}% less time", 100.0 * saving);
    println!("batchwise vs half width:  {:+.1}%", -100.0 * vs_half);
    Ok(())
}
