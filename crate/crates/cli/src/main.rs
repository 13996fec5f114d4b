use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use flowleak::experiment::{self, ExperimentConfig, RunRecord};

/// Federated gradient-leakage experiments.
#[derive(Parser)]
#[command(name = "flowleak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment description (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write every seed's client, target and evaluation images.
    GenData(Common),
    /// Run global FedAvg training and store the per-round weights.
    TrainFl(Common),
    /// Train the flow-matching prior.
    TrainFlow(Common),
    /// Measure the prior's velocity magnitude on noised images (msf.csv).
    ProbeFlow(Common),
    /// Attack every sweep cell for the base seed only.
    Attack(Common),
    /// Attack every sweep cell for all repeats.
    Sweep(Common),
    /// Aggregate run directories into summary.csv.
    Report {
        #[command(flatten)]
        common: Common,
        /// Further run directories to include.
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
        /// Output file; defaults to summary.csv in the config's run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_record(rec: &RunRecord) -> ExitCode {
    for r in &rec.rows {
        println!(
            "seed {} round {} B {} {} {} lambda {} {}: psnr {:.3} ssim {:.4} mse {:.4e} ({} iterations, {})",
            r.seed, r.round, r.batch_size, r.defense, r.defense_param, r.lambda, r.variant, r.psnr, r.ssim, r.mse, r.iterations, r.stop_reason
        );
    }
    for e in &rec.errors {
        eprintln!("error in cell {} seed {} during {}: {}", e.cell, e.seed, e.stage, e.message);
    }
    println!("run directory: {}", rec.run_dir.display());
    if rec.errors.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(c) => {
            for d in experiment::gen_data(&c.load()?)? {
                println!("{}", d.display());
            }
        }
        Command::TrainFl(c) => {
            for p in experiment::train_fl(&c.load()?)? {
                println!("{}", p.display());
            }
        }
        Command::TrainFlow(c) => println!("{}", experiment::train_flow(&c.load()?)?.display()),
        Command::ProbeFlow(c) => println!("{}", experiment::probe_flow(&c.load()?)?.display()),
        Command::Attack(c) => {
            let mut cfg = c.load()?;
            cfg.repeats = 1;
            return Ok(print_record(&experiment::run_experiment(&cfg)?));
        }
        Command::Sweep(c) => return Ok(print_record(&experiment::run_experiment(&c.load()?)?)),
        Command::Report { common, runs, out } => {
            let cfg = common.load()?;
            let own = cfg.out_dir.join(&cfg.name);
            let mut dirs = vec![own.clone()];
            dirs.extend(runs);
            let out = out.unwrap_or_else(|| own.join("summary.csv"));
            let n = experiment::report(&dirs, &out)?;
            println!("{n} cells -> {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
