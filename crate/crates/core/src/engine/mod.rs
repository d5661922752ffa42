//! Training orchestration: the composite objective, stages, schemes, evaluation
//! and run logs.

mod config;
mod eval;
mod objective;
mod optim;
mod train;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub use config::{DistillConfig, DistillPositions, Schedule, Scheme, StageHyper, StageName, StageSpec};
pub use eval::{evaluate, greedy_answers, EvalReport};
pub use objective::{ce_loss, ce_loss_on_tape, record_objective, total_loss, LossBreakdown, ObjectiveVars, PreparedBatch};
pub use optim::{learning_rate, AdamW, Moments, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{run_scheme, train_stage, LogRecord, SchemeReport, TrainState};

use crate::error::{Error, Result};

/// Writes one JSON object per record.
pub fn write_run_log(records: &[LogRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a log written by [`write_run_log`].
pub fn read_run_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
