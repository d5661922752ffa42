//! Fixed-schema CSV rows for runs and sweeps, plus the console table.
//!
//! Columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `kind` | `run` for one seed, `mean` for the mean over seeds |
//! | `scheme` | `pt-sft`, `dpt-sft`, `pt-dft` or `dpt-dft` |
//! | `strategy` | distillation loss, e.g. `dbild-rkl` |
//! | `switch` | whether the visual-switch term was enabled |
//! | `seed` | run seed (empty on `mean` rows) |
//! | `n_seeds` | seeds aggregated in the row |
//! | `val_accuracy` | exact-match validation accuracy (mean on `mean` rows) |
//! | `val_accuracy_sd` | sample standard deviation across seeds (`mean` rows with two or more seeds) |
//! | `agreement` | fraction of validation answers equal to the teacher's |
//! | `l_ce`, `l_align`, `l_vsd`, `total` | loss terms at the last training step (empty when a term is not formed) |
//! | `steps` | optimizer steps over both stages |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use switchkd_core::engine::{Scheme, SchemeReport};
use switchkd_core::loss::StrategyKind;

use crate::commands::Cell;
use crate::error::{CliError, CliResult};

pub const COLUMNS: [&str; 14] = [
    "kind",
    "scheme",
    "strategy",
    "switch",
    "seed",
    "n_seeds",
    "val_accuracy",
    "val_accuracy_sd",
    "agreement",
    "l_ce",
    "l_align",
    "l_vsd",
    "total",
    "steps",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Run,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub kind: RowKind,
    pub scheme: Scheme,
    pub strategy: StrategyKind,
    pub switch: bool,
    pub seed: Option<u64>,
    pub n_seeds: usize,
    pub val_accuracy: f64,
    pub val_accuracy_sd: Option<f64>,
    pub agreement: Option<f64>,
    pub l_ce: f64,
    pub l_align: Option<f64>,
    pub l_vsd: Option<f64>,
    pub total: f64,
    pub steps: usize,
}

impl RunRow {
    pub fn from_run(cell: &Cell, report: &SchemeReport) -> Self {
        let last = report.last_record();
        Self {
            kind: RowKind::Run,
            scheme: cell.scheme,
            strategy: cell.strategy,
            switch: cell.switch,
            seed: Some(cell.seed),
            n_seeds: 1,
            val_accuracy: report.eval.accuracy,
            val_accuracy_sd: None,
            agreement: report.eval.agreement,
            l_ce: last.map_or(f64::NAN, |r| r.l_ce),
            l_align: last.and_then(|r| r.l_align),
            l_vsd: last.and_then(|r| r.l_vsd),
            total: last.map_or(f64::NAN, |r| r.total),
            steps: report.stages.iter().map(|s| s.step).sum(),
        }
    }

    /// Sweep cell this row belongs to, if it is a single run.
    pub fn cell(&self) -> Option<Cell> {
        Some(Cell {
            scheme: self.scheme,
            strategy: self.strategy,
            switch: self.switch,
            seed: self.seed?,
        })
    }

    fn group(&self) -> (Scheme, StrategyKind, bool) {
        (self.scheme, self.strategy, self.switch)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n - 1 denominator); `None` below two values.
pub fn sample_sd(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

fn mean_opt(v: &[Option<f64>]) -> Option<f64> {
    let vals: Option<Vec<f64>> = v.iter().copied().collect();
    vals.map(|x| mean(&x))
}

/// One `mean` row per (scheme, strategy, switch) group, in sorted group order.
pub fn summarize(runs: &[RunRow]) -> Vec<RunRow> {
    let mut groups: BTreeMap<(Scheme, StrategyKind, bool), Vec<&RunRow>> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.kind == RowKind::Run) {
        groups.entry(r.group()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((scheme, strategy, switch), rows)| {
            let acc: Vec<f64> = rows.iter().map(|r| r.val_accuracy).collect();
            let pick = |f: fn(&RunRow) -> Option<f64>| mean_opt(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            RunRow {
                kind: RowKind::Mean,
                scheme,
                strategy,
                switch,
                seed: None,
                n_seeds: rows.len(),
                val_accuracy: mean(&acc),
                val_accuracy_sd: sample_sd(&acc),
                agreement: pick(|r| r.agreement),
                l_ce: mean(&rows.iter().map(|r| r.l_ce).collect::<Vec<_>>()),
                l_align: pick(|r| r.l_align),
                l_vsd: pick(|r| r.l_vsd),
                total: mean(&rows.iter().map(|r| r.total).collect::<Vec<_>>()),
                steps: rows[0].steps,
            }
        })
        .collect()
}

/// CSV writer that always emits the fixed header first.
pub struct SummaryWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl SummaryWriter {
    pub fn create(path: &Path) -> CliResult<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        inner.write_record(COLUMNS).map_err(|e| CliError::csv(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner,
        })
    }

    /// Opens an existing file (header already present) for appending.
    pub fn append(path: &Path) -> CliResult<Self> {
        let file = OpenOptions::new().append(true).open(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: csv::WriterBuilder::new().has_headers(false).from_writer(file),
        })
    }

    pub fn write(&mut self, row: &RunRow) -> CliResult<()> {
        self.inner.serialize(row).map_err(|e| CliError::csv(&self.path, e))
    }

    pub fn flush(&mut self) -> CliResult<()> {
        self.inner.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// Reads rows written by [`SummaryWriter`], rejecting files with another header.
pub fn read_rows(path: &Path) -> CliResult<Vec<RunRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let header = reader.headers().map_err(|e| CliError::csv(path, e))?;
    if header.iter().ne(COLUMNS) {
        return Err(CliError::Config(format!(
            "{} does not have the expected columns {}",
            path.display(),
            COLUMNS.join(",")
        )));
    }
    reader
        .deserialize()
        .collect::<Result<Vec<RunRow>, _>>()
        .map_err(|e| CliError::csv(path, e))
}

/// Console table in the layout of a strategy/scheme ablation: one line per
/// configuration, per-seed accuracies, then mean and standard deviation.
pub fn render_table(runs: &[RunRow]) -> String {
    let summary = summarize(runs);
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = runs.iter().filter_map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let mut out = String::new();
    let _ = write!(out, "{:<8} {:<7} {:<10}", "scheme", "switch", "strategy");
    for s in &seeds {
        let _ = write!(out, " {:>7}", format!("s{s}"));
    }
    let _ = writeln!(out, " {:>7} {:>7}", "mean", "sd");
    for m in &summary {
        let _ = write!(
            out,
            "{:<8} {:<7} {:<10}",
            m.scheme.label(),
            if m.switch { "w/" } else { "w/o" },
            m.strategy.label()
        );
        for s in &seeds {
            let acc = runs
                .iter()
                .find(|r| r.group() == m.group() && r.seed == Some(*s))
                .map_or("-".to_string(), |r| format!("{:.4}", r.val_accuracy));
            let _ = write!(out, " {acc:>7}");
        }
        let sd = m.val_accuracy_sd.map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(out, " {:>7.4} {sd:>7}", m.val_accuracy);
    }
    out
}
