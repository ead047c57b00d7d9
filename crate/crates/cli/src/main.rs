use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use sleepwake_cli::commands;
use sleepwake_cli::config::RunConfig;
use sleepwake_core::Strategy;

#[derive(Parser)]
#[command(name = "sleepwake", version, about = "Sensor sleep/wake quickest change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; the reference instance when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured strategy, e.g. control-m, open-loop=0.15.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Overrides the configured base seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the Bellman equation and write J.csv, policy.csv, policy.json, report.json.
    Solve(Common),
    /// Rebuild the policy from a saved J.csv.
    ExtractPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        values: PathBuf,
    },
    /// Monte Carlo evaluation; writes episodes.csv and metrics.json.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// A policy.json from a previous solve; solved afresh when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Also write trace.csv for the first replication.
        #[arg(long)]
        trace: bool,
    },
    /// Open-loop cost against the wake probability; writes sweep.csv.
    SweepQ(Common),
    /// Find the false-alarm cost that meets a false-alarm rate.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        target_alpha: f64,
    },
    /// Data files for the standard plots.
    Figures(Common),
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::reference(),
    };
    if let Some(s) = common.strategy {
        config.strategy = s;
    }
    if let Some(seed) = common.seed {
        config.sim.base_seed = seed;
    }
    config.validate()?;
    let out = common
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| Path::new("out").to_path_buf());
    Ok((config, out))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve(common) => {
            let (config, out) = load(&common)?;
            print_json(&commands::cmd_solve(&config, &out)?)
        }
        Command::ExtractPolicy { common, values } => {
            let (config, out) = load(&common)?;
            print_json(&commands::cmd_extract_policy(&config, &values, &out)?)
        }
        Command::Simulate {
            common,
            policy,
            trace,
        } => {
            let (config, out) = load(&common)?;
            print_json(&commands::cmd_simulate(&config, &out, policy.as_deref(), trace)?)
        }
        Command::SweepQ(common) => {
            let (config, out) = load(&common)?;
            print_json(&commands::cmd_sweep_q(&config, &out)?)
        }
        Command::Calibrate {
            common,
            target_alpha,
        } => {
            let (config, out) = load(&common)?;
            print_json(&commands::cmd_calibrate(&config, &out, target_alpha)?)
        }
        Command::Figures(common) => {
            let (config, out) = load(&common)?;
            print_json(&commands::cmd_figures(&config, &out)?)
        }
    }
}

fn main() -> ExitCode {
    // Usage errors share exit status 1 with configuration errors; 2 is
    // reserved for non-convergence.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(sleepwake_cli::exit_code(&err) as u8)
        }
    }
}
