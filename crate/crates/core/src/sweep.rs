//! Runs every config of a sweep on a bounded worker pool and writes results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::SweepSpec;
use crate::error::{invalid, io_err, QmlError, Result};
use crate::experiment::{run_experiment, summary_rows, write_outputs, ExperimentResult, SUMMARY_HEADER};

#[derive(Debug)]
pub struct SweepOutcome {
    /// Completed experiments, in config order.
    pub results: Vec<ExperimentResult>,
    /// `(config id, error)` for every failed experiment, in config order.
    pub failures: Vec<(String, QmlError)>,
    pub files: Vec<PathBuf>,
}

impl SweepOutcome {
    pub fn success(&self) -> bool {
        self.failures.is_empty()
    }
}

type Completed = (ExperimentResult, Vec<PathBuf>);

/// One line per expanded config.
pub fn dry_run_listing(spec: &SweepSpec) -> String {
    let mut out = String::new();
    for (i, c) in spec.configs.iter().enumerate() {
        let seeds: Vec<String> = c.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "{:>3} {:<32} qubits={} depth={} epochs={} batch={} train={} test={} seeds={}",
            i + 1,
            c.id(),
            c.n_qubits,
            c.depth,
            c.epochs,
            c.batch_size,
            c.n_train,
            c.n_test,
            seeds.join(",")
        );
    }
    out
}

/// Executes `spec` with at most `parallelism` worker threads. Each finished
/// experiment's files are written as soon as it completes, so a failure
/// elsewhere leaves them in place. Per-task `curves_<task>.csv` files then
/// collect the summaries of every variant of that task.
pub fn run_sweep(spec: &SweepSpec, parallelism: usize, out_dir: &Path) -> Result<SweepOutcome> {
    if parallelism == 0 {
        return Err(invalid("parallelism must be at least 1"));
    }
    let mut outcome = SweepOutcome {
        results: Vec::new(),
        failures: Vec::new(),
        files: Vec::new(),
    };
    if spec.is_empty() {
        return Ok(outcome);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| QmlError::Internal(format!("cannot start worker pool: {e}")))?;

    let runs: Vec<(String, Result<Completed>)> = pool.install(|| {
        spec.configs
            .par_iter()
            .map(|cfg| {
                log::info!("start {}", cfg.id());
                let run = run_experiment(cfg).and_then(|r| {
                    let files = write_outputs(&r, out_dir)?;
                    Ok((r, files))
                });
                match &run {
                    Ok((r, _)) => {
                        let f = r.final_epoch();
                        log::info!(
                            "done {}: final acc {:.3}",
                            cfg.id(),
                            f.map_or(f64::NAN, |s| s.acc_mean)
                        );
                    }
                    Err(e) => log::error!("{} failed: {e}", cfg.id()),
                }
                (cfg.id(), run)
            })
            .collect()
    });

    for (id, run) in runs {
        match run {
            Ok((r, files)) => {
                outcome.results.push(r);
                outcome.files.extend(files);
            }
            Err(e) => outcome.failures.push((id, e)),
        }
    }

    let mut tasks: Vec<String> = Vec::new();
    for r in &outcome.results {
        let label = r.config.task.label();
        if !tasks.contains(&label) {
            tasks.push(label);
        }
    }
    for task in tasks {
        let mut csv = format!("{SUMMARY_HEADER}\n");
        for r in outcome.results.iter().filter(|r| r.config.task.label() == task) {
            csv.push_str(&summary_rows(r));
        }
        let path = out_dir.join(format!("curves_{task}.csv"));
        fs::write(&path, csv).map_err(io_err(&path))?;
        outcome.files.push(path);
    }
    Ok(outcome)
}

/// Final-epoch accuracy `mean±std`, one row per variant, one column per task.
pub fn summary_table(results: &[ExperimentResult]) -> String {
    let mut variants = Vec::new();
    let mut tasks = Vec::new();
    for r in results {
        if !variants.contains(&r.config.variant) {
            variants.push(r.config.variant);
        }
        let label = r.config.task.label();
        if !tasks.contains(&label) {
            tasks.push(label);
        }
    }
    let width = tasks.iter().map(String::len).max().unwrap_or(0).max(13);
    let mut out = format!("{:<20}", "variant");
    for t in &tasks {
        let _ = write!(out, " {t:>width$}");
    }
    out.push('\n');
    for v in variants {
        let _ = write!(out, "{:<20}", v.name());
        for t in &tasks {
            let cell = results
                .iter()
                .find(|r| r.config.variant == v && &r.config.task.label() == t)
                .and_then(ExperimentResult::final_epoch)
                .map_or_else(|| "-".to_string(), |s| format!("{:.3}±{:.3}", s.acc_mean, s.acc_std));
            let _ = write!(out, " {cell:>width$}");
        }
        out.push('\n');
    }
    out
}
