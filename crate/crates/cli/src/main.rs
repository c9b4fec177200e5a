use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use qmeas_core::config::parse_config;
use qmeas_core::plot::plot;
use qmeas_core::selftest::run_selftest;
use qmeas_core::sweep::{dry_run_listing, run_sweep, summary_table};

#[derive(Parser)]
#[command(name = "qmeas", version, about = "Benchmark variational classifiers with learned and programmed observables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand a sweep config and train every configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for CSV and manifest files.
        #[arg(long, env = "QML_OUT_DIR", default_value = "results")]
        out: PathBuf,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Print the expanded configurations without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Render a summary CSV as an SVG learning-curve chart.
    Plot {
        #[arg(long)]
        summary: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient and invariant self-check.
    Selftest,
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            parallel,
            dry_run,
        } => {
            let spec = parse_config(&config)?.with_out_dir(&out);
            if dry_run {
                print!("{}", dry_run_listing(&spec));
                return Ok(());
            }
            log::info!("{} configurations, {} worker(s), output in {}", spec.len(), parallel, out.display());
            let outcome = run_sweep(&spec, parallel, &out)?;
            if !outcome.results.is_empty() {
                print!("{}", summary_table(&outcome.results));
            }
            if !outcome.success() {
                for (id, e) in &outcome.failures {
                    eprintln!("{id}: {e}");
                }
                bail!("{} of {} configurations failed", outcome.failures.len(), spec.len());
            }
        }
        Command::Plot { summary, out } => {
            plot(&summary, &out).with_context(|| format!("plotting {}", summary.display()))?;
        }
        Command::Selftest => {
            let checks = run_selftest();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                bail!("{failed} self-check(s) failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
