use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use trq_cli::report::render;
use trq_cli::run::{self, load_report};
use trq_cli::RunConfig;

/// Build, calibrate and benchmark ternary residual refinement for IVF-PQ search.
#[derive(Parser)]
#[command(name = "trq", version)]
struct Cli {
    /// TOML run configuration. Defaults to the chosen preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent (desk, smoke).
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Config override as dotted.key=value; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the codebook, build the IVF index and encode residual records.
    Build,
    /// Exact nearest neighbors of every query.
    Gt,
    /// Fit the distance calibration model.
    Calibrate,
    /// Distortion table, refinement sweep and cost table.
    Bench,
    /// build, gt, calibrate and bench in one go.
    Run,
    /// Print a benchmark report as text.
    Report {
        /// Report file; defaults to report.json in the output directory.
        path: Option<PathBuf>,
    },
    /// Write the synthetic dataset as .fvecs files.
    Synth,
    /// Print the effective configuration as TOML.
    Config,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(&cli.preset)?,
    };
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.with_overrides(&cli.overrides).context("applying --set overrides")
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    match &cli.command {
        Command::Build => {
            let m = run::cmd_build(cfg)?;
            println!(
                "built {} records, dim {}, {} lists; residual stride {} bytes ({:.3} bits/dim)",
                m.records, m.dim, m.nlist, m.trq.stride, m.trq.bits_per_dim
            );
        }
        Command::Gt => {
            let gt = run::cmd_gt(cfg)?;
            println!("ground truth: {} queries, k = {}", gt.num_queries(), gt.k);
        }
        Command::Calibrate => {
            let (_, s) = run::cmd_calibrate(cfg)?;
            println!(
                "calibrated on {} pairs; mse raw {:.4} -> calibrated {:.4}",
                s.train_pairs, s.mse_raw, s.mse_calibrated
            );
        }
        Command::Bench => print!("{}", render(&run::cmd_bench(cfg)?)),
        Command::Run => print!("{}", render(&run::cmd_run(cfg)?)),
        Command::Report { path } => {
            let path = path.clone().unwrap_or_else(|| cfg.out_dir.join(run::REPORT));
            print!("{}", render(&load_report(&path).context("report")?));
        }
        Command::Synth => {
            let (b, q) = run::cmd_synth(cfg)?;
            println!("wrote {} and {}", b.display(), q.display());
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(&cli).context("config").and_then(|cfg| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build()
            .context("starting worker threads")?;
        pool.install(|| dispatch(&cli, &cfg))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("trq: {e:#}");
            ExitCode::FAILURE
        }
    }
}
