use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};
use volterra_mfg::cli;

/// Mean-field game solver for stochastic Volterra dynamics.
#[derive(Parser)]
#[command(name = "volterra-mfg", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// Model/experiment configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// RNG seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (falls back to VOLTERRA_MFG_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the solvability margins and report pass/fail.
    Check,
    /// Solve the consistency equation and write the trajectory.
    Nce,
    /// Run the convergence-rate experiment across population sizes.
    Rates,
    /// Run the deviation experiments for player 1.
    Deviate,
    /// Convert a delay model to its Volterra form and emit the kernels.
    Convert,
}

fn run(args: &Args) -> volterra_mfg::Result<i32> {
    let config = args
        .config
        .as_deref()
        .ok_or_else(|| volterra_mfg::Error::Config("--config is required".into()))?;
    let ctx = cli::load_context(config, args.out.as_deref(), args.seed)?;
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    eprintln!("run started at unix time {started} (seed {})", ctx.seed);
    match args.command {
        Command::Check => cli::cmd_check(&ctx),
        Command::Nce => cli::cmd_nce(&ctx),
        Command::Rates => cli::cmd_rates(&ctx),
        Command::Deviate => cli::cmd_deviate(&ctx),
        Command::Convert => cli::cmd_convert(&ctx),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let threads = args.threads.or_else(|| {
        std::env::var("VOLTERRA_MFG_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(t) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("warning: could not configure {t} threads: {e}");
        }
    }
    match run(&args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code_for(&err) as u8)
        }
    }
}
