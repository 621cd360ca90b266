//! `riesz-dml`: debiased kernel estimation from the command line.
//!
//! Exit codes: 0 success, 1 failed self-verification, 2 configuration
//! error, 3 data error, 4 numerical error.

mod commands;
mod config;
mod data;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "riesz-dml", version, about = "Debiased kernel inference for causal functionals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-fitted estimate and confidence interval.
    Estimate(RunArgs),
    /// Cross-validation tables for both regularization levels.
    Tune(RunArgs),
    /// Monte Carlo coverage study on a synthetic process.
    Simulate(RunArgs),
    /// Self-check against the reference oracles; needs no data.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `io.data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides `io.out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Only `seed` is read from it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shift applied to the closed-form Riesz coefficients; any nonzero
    /// value should make the suite fail.
    #[arg(long, default_value_t = 0.0)]
    perturb: f64,
}

fn load(path: &Path) -> anyhow::Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| riesz_core::Error::config(format!("threads: {e}")))?;
    }
    Ok(cfg)
}

fn data_path(cli: Option<PathBuf>, cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    Ok(cli
        .or_else(|| cfg.io.data.clone())
        .ok_or_else(|| riesz_core::Error::config("io.data: no data file (set io.data or pass --data)"))?)
}

fn emit(doc: &str, out: Option<&Path>) -> anyhow::Result<()> {
    if let Some(p) = out {
        std::fs::write(p, doc)
            .map_err(|e| riesz_core::Error::input(format!("cannot write {}: {e}", p.display())))
            .with_context(|| "writing output")?;
    }
    print!("{doc}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Estimate(a) => {
            let cfg = load(&a.config)?;
            let data = data_path(a.data, &cfg)?;
            let out = commands::estimate(&cfg, &data).with_context(|| format!("estimating from {}", data.display()))?;
            emit(&output::json(&out), a.out.or(cfg.io.out).as_deref())?;
        }
        Command::Tune(a) => {
            let cfg = load(&a.config)?;
            let data = data_path(a.data, &cfg)?;
            let out = commands::tune(&cfg, &data).with_context(|| format!("tuning on {}", data.display()))?;
            emit(&output::json(&out), a.out.or(cfg.io.out).as_deref())?;
        }
        Command::Simulate(a) => {
            let cfg = load(&a.config)?;
            if a.data.is_some() {
                return Err(riesz_core::Error::config("--data: simulate generates its own data").into());
            }
            if cfg.kernel.is_some() {
                eprintln!("note: simulate uses the process's default kernel; the kernel section is ignored");
            }
            let path = a
                .out
                .or(cfg.io.out.clone())
                .ok_or_else(|| riesz_core::Error::config("io.out: simulate needs an output path (set io.out or pass --out)"))?;
            let row = commands::simulate(&cfg).context("coverage study")?;
            let csv = output::coverage_csv(std::slice::from_ref(&row)).context("formatting coverage table")?;
            std::fs::write(&path, csv).map_err(|e| riesz_core::Error::input(format!("cannot write {}: {e}", path.display())))?;
            print!("{}", output::json(&row));
        }
        Command::Verify(a) => {
            let seed = match &a.config {
                Some(p) => load(p)?.seed,
                None => 0,
            };
            if !a.perturb.is_finite() {
                return Err(riesz_core::Error::config("--perturb: must be finite").into());
            }
            let checks = commands::verify(a.perturb, seed);
            print!("{}", commands::verify_table(&checks));
            if checks.iter().any(|c| !c.passed) {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use riesz_core::Error;
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::root) {
        Some(Error::Config(_)) => 2,
        Some(Error::Input(_) | Error::Degenerate(_)) => 3,
        Some(Error::Numerical(_) | Error::Oracle(_)) => 4,
        Some(Error::Fold { .. }) => unreachable!("root strips fold wrappers"),
        None => 1,
    }
}

fn main() -> ExitCode {
    riesz_core::linalg::ensure_sequential();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
