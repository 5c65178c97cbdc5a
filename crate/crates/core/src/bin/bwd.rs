use std::path::PathBuf;
use std::process::ExitCode;

use batchwise_dropout::cli::{self, BenchConfig, CommonOptions, PatternsConfig, RunConfig};
use batchwise_dropout::data::ArtificialSpec;
use batchwise_dropout::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bwd", version, about = "Dropout training with per-minibatch shared masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fixed-order summation and a single evaluation thread.
    #[arg(long)]
    deterministic: bool,
    /// Evaluation worker threads.
    #[arg(long, env = "BWD_THREADS", default_value_t = 1)]
    threads: usize,
}

impl Common {
    fn options(&self) -> CommonOptions {
        CommonOptions { seed: self.seed, out: self.out.clone(), deterministic: self.deterministic, threads: self.threads }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write an artificial dataset as IDX files.
    GenData(Common),
    /// Train a network and log per-epoch metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Test error of a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Time the dropout paths over a grid of networks.
    Bench(Common),
    /// Restricted dropout-pattern experiment.
    ExpPatterns(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let spec: ArtificialSpec = cli::load_json(&c.config)?;
            let dir = cli::cmd_gen_data(&spec, &c.options())?;
            cli::say(format!("wrote {}", dir.display()));
        }
        Command::Train { common, resume } => {
            let cfg = RunConfig::load(&common.config)?;
            let metrics = cli::cmd_train(&cfg, &common.options(), resume)?;
            if let Some(last) = metrics.last() {
                cli::say(format!("final test error {:.4}%", last.test_error));
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = RunConfig::load(&common.config)?;
            let err = cli::cmd_eval(&checkpoint, &cfg, &common.options())?;
            cli::say(format!("test error {err:.4}%"));
        }
        Command::Bench(c) => {
            let cfg: BenchConfig = cli::load_json(&c.config)?;
            let report = cli::cmd_bench(&cfg, &c.options())?;
            cli::say(report.table());
        }
        Command::ExpPatterns(c) => {
            let cfg: PatternsConfig = cli::load_json(&c.config)?;
            for row in cli::cmd_experiment_patterns(&cfg, &c.options())? {
                let period = row.period.map_or("-".to_string(), |p| p.to_string());
                cli::say(format!("{:<12} period {:>5} seed {:>4} test {:.2}%", row.kind, period, row.seed, row.test_error_pct));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
