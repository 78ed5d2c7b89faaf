//! `neq`: command-line driver for the equalization lab.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "neq", version, about = "Wireline equalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (sections of key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides one config key, as `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic lossy channel file.
    GenChannel {
        /// Attenuation at half the symbol rate, in dB.
        #[arg(long)]
        loss_db: f64,
        #[arg(long, default_value_t = 10)]
        taps: usize,
        #[arg(long, default_value_t = 2)]
        pre: usize,
        /// Channel file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the stage network and writes a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the saved training state in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many batches, saving a resumable state.
        #[arg(long, value_name = "BATCHES")]
        stop_after: Option<u64>,
    },
    /// BER versus SNR for a roster of equalizers.
    Sweep(Common),
    /// Iterative magnitude pruning with fine-tuning.
    Prune(Common),
    /// BER under random perturbations of the channel taps.
    Robustness(Common),
    /// Validation BER for a list of stage widths.
    Gridsearch(Common),
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("run.seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NEQ_THREADS") {
        let n: usize = v.parse().with_context(|| format!("NEQ_THREADS must be a positive integer, got '{v}'"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let with = |common: &Common, f: fn(&RunConfig, &Path) -> Result<()>| -> Result<()> {
        let cfg = load_config(common)?;
        f(&cfg, &common.out)
    };
    match &cli.command {
        Command::GenChannel { loss_db, taps, pre, out } => commands::cmd_gen_channel(*loss_db, *taps, *pre, out),
        Command::Train { common, resume, stop_after } => {
            let cfg = load_config(common)?;
            commands::cmd_train(&cfg, &common.out, *resume, *stop_after)
        }
        Command::Sweep(c) => with(c, commands::cmd_sweep),
        Command::Prune(c) => with(c, commands::cmd_prune),
        Command::Robustness(c) => with(c, commands::cmd_robustness),
        Command::Gridsearch(c) => with(c, commands::cmd_gridsearch),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
