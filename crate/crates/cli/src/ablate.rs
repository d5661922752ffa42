//! Resumable Cartesian sweeps.
//!
//! Each finished cell is appended to `ablation.csv` and flushed at once, so an
//! interrupted sweep loses at most the cells in flight. A rerun reads the file,
//! skips every cell already present and, once all cells are done, rewrites the
//! file in canonical order with one `mean` row per configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;

use rayon::prelude::*;

use crate::commands::{load_splits, load_teacher, run_cell, Cell};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::report::{read_rows, summarize, RowKind, RunRow, SummaryWriter};

pub const ABLATION_FILE: &str = "ablation.csv";

/// Environment variable capping the number of sweep workers.
pub const THREADS_ENV: &str = "SWITCHKD_THREADS";

/// Worker count: `SWITCHKD_THREADS` when set, otherwise the available parallelism.
pub fn worker_threads() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Every cell of the configured sweep, in canonical order.
pub fn cells(cfg: &RunConfig) -> Vec<Cell> {
    let a = &cfg.ablate;
    let mut out = BTreeSet::new();
    for &scheme in &a.schemes {
        for &strategy in &a.strategies {
            for &switch in &a.switch {
                for &seed in &cfg.seeds {
                    out.insert(Cell {
                        scheme,
                        strategy,
                        switch,
                        seed,
                    });
                }
            }
        }
    }
    out.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateOutcome {
    pub csv: PathBuf,
    /// Per-seed rows in canonical order.
    pub runs: Vec<RunRow>,
    pub summary: Vec<RunRow>,
    /// Cells trained by this invocation (the rest were resumed from the file).
    pub trained: usize,
}

pub fn ablate(cfg: &RunConfig) -> CliResult<AblateOutcome> {
    let wanted = cells(cfg);
    let csv = cfg.out.join(ABLATION_FILE);
    let previous: Vec<RunRow> = if csv.exists() {
        read_rows(&csv)?.into_iter().filter(|r| r.kind == RowKind::Run).collect()
    } else {
        fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
        Vec::new()
    };
    let done: BTreeSet<Cell> = previous.iter().filter_map(RunRow::cell).collect();
    let todo: Vec<Cell> = wanted.iter().copied().filter(|c| !done.contains(c)).collect();

    // Rewrite without stale summary rows so that appends land after the runs.
    let mut writer = SummaryWriter::create(&csv)?;
    for r in &previous {
        writer.write(r)?;
    }
    writer.flush()?;
    drop(writer);

    if !todo.is_empty() {
        let teacher = load_teacher(cfg)?;
        let data = load_splits(&cfg.data_dir())?;
        let writer = Mutex::new(SummaryWriter::append(&csv)?);
        let total = todo.len();
        let finished = Mutex::new(0usize);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(worker_threads()?)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
        pool.install(|| {
            todo.par_iter().try_for_each(|&cell| -> CliResult<()> {
                let outcome = run_cell(cfg, &teacher, &data, cell)?;
                let mut w = writer.lock().expect("writer lock");
                w.write(&outcome.row)?;
                w.flush()?;
                let mut n = finished.lock().expect("counter lock");
                *n += 1;
                eprintln!(
                    "[{}/{}] {} val_accuracy {:.4}",
                    *n,
                    total,
                    cell.name(),
                    outcome.row.val_accuracy
                );
                Ok(())
            })
        })?;
    }

    let mut all = read_rows(&csv)?;
    let wanted_set: BTreeSet<Cell> = wanted.iter().copied().collect();
    all.retain(|r| r.cell().is_some_and(|c| wanted_set.contains(&c)));
    all.sort_by_key(|r| r.cell());
    all.dedup_by_key(|r| r.cell());
    let summary = summarize(&all);
    let mut writer = SummaryWriter::create(&csv)?;
    for r in all.iter().chain(&summary) {
        writer.write(r)?;
    }
    writer.flush()?;
    Ok(AblateOutcome {
        csv,
        runs: all,
        summary,
        trained: todo.len(),
    })
}
