//! One function per subcommand. Each reads its inputs from the output tree, writes
//! its artifacts back into it and returns a summary for the caller to print.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use switchkd_core::data::{generate, load_samples, persist_samples, DatasetSpec, Sample};
use switchkd_core::engine::{
    evaluate, read_run_log, run_scheme, train_stage, write_run_log, DistillConfig, EvalReport, LogRecord, Scheme,
    StageName, StageSpec,
};
use switchkd_core::loss::{LossStrategy, StrategyKind};
use switchkd_core::model::{check_switch_compatible, load_checkpoint, save_checkpoint, ToyVLM};
use switchkd_core::verify::{self, VerifyReport};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::report::{RunRow, SummaryWriter};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";

/// Train and validation splits as stored on disk.
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

fn write_splits(spec: &DatasetSpec, dir: &Path) -> CliResult<[PathBuf; 2]> {
    let data = generate(spec)?;
    let train = dir.join(TRAIN_FILE);
    let val = dir.join(VAL_FILE);
    persist_samples(&data.train, &train)?;
    persist_samples(&data.val, &val)?;
    Ok([train, val])
}

/// Writes the student dataset (and the teacher's, when configured separately).
pub fn gen_data(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let mut written = write_splits(&cfg.dataset, &cfg.data_dir())?.to_vec();
    if let Some(spec) = &cfg.teacher_dataset {
        written.extend(write_splits(spec, &cfg.teacher_data_dir())?);
    }
    Ok(written)
}

pub fn load_splits(dir: &Path) -> CliResult<Splits> {
    let train = dir.join(TRAIN_FILE);
    let val = dir.join(VAL_FILE);
    for path in [&train, &val] {
        if !path.exists() {
            return Err(CliError::Missing {
                what: "dataset",
                path: path.clone(),
                hint: "run `switchkd gen-data` with the same config first",
            });
        }
    }
    Ok(Splits {
        train: load_samples(&train)?,
        val: load_samples(&val)?,
    })
}

/// Loads the teacher checkpoint and checks it matches the configured architecture.
pub fn load_teacher(cfg: &RunConfig) -> CliResult<ToyVLM> {
    let path = cfg.teacher_checkpoint();
    if !path.exists() {
        return Err(CliError::Missing {
            what: "teacher checkpoint",
            path,
            hint: "run `switchkd train-teacher` with the same config first",
        });
    }
    let teacher = load_checkpoint(&path)?;
    if teacher.config != cfg.teacher {
        return Err(CliError::Config(format!(
            "teacher checkpoint {} was trained with a different architecture than `teacher` in the config",
            path.display()
        )));
    }
    Ok(teacher)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(switchkd_core::Error::from)?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherOutcome {
    pub checkpoint: PathBuf,
    pub eval: EvalReport,
}

/// Trains the teacher with PT then SFT and saves checkpoint, run log and metrics.
pub fn train_teacher(cfg: &RunConfig) -> CliResult<TeacherOutcome> {
    let data = load_splits(&cfg.teacher_data_dir())?;
    let mut teacher = ToyVLM::new(cfg.teacher, cfg.seed)?;
    let recipe = DistillConfig {
        pt: cfg.teacher_training.pt,
        ft: cfg.teacher_training.sft,
        ..cfg.distill.clone()
    };
    let mut log = Vec::new();
    for stage in [StageName::Pt, StageName::Sft] {
        let state = train_stage(&mut teacher, None, &data.train, &data.val, StageSpec::new(stage), &recipe, cfg.seed)?;
        log.extend(state.log);
    }
    let eval = evaluate(&teacher, &data.val, None)?;
    let checkpoint = cfg.teacher_checkpoint();
    let dir = checkpoint.parent().expect("checkpoint has a parent").to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    save_checkpoint(&teacher, &checkpoint)?;
    write_run_log(&log, &dir.join("log.jsonl"))?;
    let outcome = TeacherOutcome { checkpoint, eval };
    write_json(&outcome.eval, &dir.join("metrics.json"))?;
    Ok(outcome)
}

/// One configuration of a distillation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub scheme: Scheme,
    pub strategy: StrategyKind,
    pub switch: bool,
    pub seed: u64,
}

impl Cell {
    /// Directory name under `runs/`.
    pub fn name(&self) -> String {
        format!(
            "{}_{}_{}_s{}",
            self.scheme,
            self.strategy,
            if self.switch { "switch" } else { "noswitch" },
            self.seed
        )
    }

    pub fn distill_config(&self, base: &DistillConfig) -> DistillConfig {
        DistillConfig {
            scheme: self.scheme,
            strategy: LossStrategy {
                kind: self.strategy,
                ..base.strategy
            },
            switch_enabled: self.switch,
            ..base.clone()
        }
    }
}

/// Everything one finished run leaves behind.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub row: RunRow,
    pub log: Vec<LogRecord>,
}

/// Trains a fresh student for `cell` and writes checkpoint, log and a one-row summary.
pub fn run_cell(cfg: &RunConfig, teacher: &ToyVLM, data: &Splits, cell: Cell) -> CliResult<RunOutcome> {
    check_switch_compatible(&teacher.config, &cfg.student)?;
    let dcfg = cell.distill_config(&cfg.distill);
    let mut student = ToyVLM::new(cfg.student, cell.seed)?;
    let report = run_scheme(teacher, &mut student, &data.train, &data.val, &dcfg, cell.seed)?;
    let log = report.log();
    let row = RunRow::from_run(&cell, &report);

    let dir = cfg.runs_dir().join(cell.name());
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    save_checkpoint(&student, &dir.join("student.json"))?;
    write_run_log(&log, &dir.join("log.jsonl"))?;
    let summary = dir.join("summary.csv");
    let mut w = SummaryWriter::create(&summary)?;
    w.write(&row)?;
    w.flush()?;
    Ok(RunOutcome { dir, row, log })
}

/// The `distill` command: one cell with the config's seed.
pub fn distill(cfg: &RunConfig, scheme: Scheme, strategy: StrategyKind, switch: bool) -> CliResult<RunOutcome> {
    let teacher = load_teacher(cfg)?;
    let data = load_splits(&cfg.data_dir())?;
    run_cell(
        cfg,
        &teacher,
        &data,
        Cell {
            scheme,
            strategy,
            switch,
            seed: cfg.seed,
        },
    )
}

/// What `eval` reports: fresh evaluation plus the last logged losses when a run log exists.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutcome {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub eval: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_record: Option<LogRecord>,
}

/// Re-evaluates a checkpoint on the validation split.
///
/// Without `checkpoint` the teacher is evaluated on its own data; any other
/// checkpoint is evaluated on the student data, with agreement against the
/// teacher when one has been trained.
pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<EvalOutcome> {
    let (path, data_dir, is_teacher) = match checkpoint {
        None => (cfg.teacher_checkpoint(), cfg.teacher_data_dir(), true),
        Some(p) if p.is_dir() => (p.join("student.json"), cfg.data_dir(), false),
        Some(p) => (p.to_path_buf(), cfg.data_dir(), false),
    };
    if !path.exists() {
        return Err(CliError::Missing {
            what: "checkpoint",
            path,
            hint: "train a teacher or run `switchkd distill` first",
        });
    }
    let model = load_checkpoint(&path)?;
    let data = load_splits(&data_dir)?;
    let reference = if !is_teacher && cfg.teacher_checkpoint().exists() {
        Some(load_teacher(cfg)?)
    } else {
        None
    };
    let eval = evaluate(&model, &data.val, reference.as_ref())?;
    let log_path = path.with_file_name("log.jsonl");
    let last_record = if log_path.exists() {
        read_run_log(&log_path)?.pop()
    } else {
        None
    };
    Ok(EvalOutcome {
        checkpoint: path,
        data: data_dir.join(VAL_FILE),
        eval,
        last_record,
    })
}

/// The full self-check suite; failure maps to exit code 3 in the binary.
pub fn verify(seed: u64) -> VerifyReport {
    verify::run_all(seed)
}
