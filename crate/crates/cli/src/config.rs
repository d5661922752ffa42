//! The run document: one validated JSON file describing data, models, training and sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use switchkd_core::data::{DatasetSpec, Task};
use switchkd_core::engine::{DistillConfig, Scheme, StageHyper};
use switchkd_core::loss::StrategyKind;
use switchkd_core::model::{check_switch_compatible, ModelConfig};

use crate::error::{CliError, CliResult};

/// Hyperparameters of the teacher's own PT then SFT training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherTraining {
    pub pt: StageHyper,
    pub sft: StageHyper,
}

impl Default for TeacherTraining {
    fn default() -> Self {
        Self {
            pt: StageHyper::pretraining(),
            sft: StageHyper {
                learning_rate: 1e-3,
                batch_size: 32,
                epochs: 6,
                ..StageHyper::fine_tuning()
            },
        }
    }
}

/// Axes of an ablation sweep; every combination is run for every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateAxes {
    pub strategies: Vec<StrategyKind>,
    pub switch: Vec<bool>,
    pub schemes: Vec<Scheme>,
}

impl Default for AblateAxes {
    fn default() -> Self {
        Self {
            strategies: StrategyKind::ALL.to_vec(),
            switch: vec![true],
            schemes: vec![Scheme::PtDft],
        }
    }
}

/// Everything a command needs. Missing fields take the defaults below; unknown
/// fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Student training and validation data.
    pub dataset: DatasetSpec,
    /// Separate data for the teacher; the student dataset is used when absent.
    pub teacher_dataset: Option<DatasetSpec>,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub teacher_training: TeacherTraining,
    pub distill: DistillConfig,
    pub ablate: AblateAxes,
    /// Root directory of every artifact.
    pub out: PathBuf,
    /// Teacher initialization and single-run student seed.
    pub seed: u64,
    /// Seeds of a sweep.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec {
                noise_level: 0.2,
                ..DatasetSpec::new(1000, 2000, 1, Task::ShapeAtPosition)
            },
            teacher_dataset: Some(DatasetSpec::new(8000, 1000, 2, Task::ShapeAtPosition)),
            teacher: ModelConfig::teacher(),
            student: ModelConfig::student(),
            teacher_training: TeacherTraining::default(),
            distill: DistillConfig {
                ft: StageHyper {
                    learning_rate: 1e-3,
                    epochs: 12,
                    ..StageHyper::fine_tuning()
                },
                ..DistillConfig::default()
            },
            ablate: AblateAxes::default(),
            out: PathBuf::from("runs"),
            seed: 0,
            seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file; parse errors name the offending field.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            CliError::Config(format!("field `{field}`: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        let named = |what: &str, e: switchkd_core::Error| CliError::Config(format!("{what}: {e}"));
        self.dataset.validate().map_err(|e| named("dataset", e))?;
        if let Some(t) = &self.teacher_dataset {
            t.validate().map_err(|e| named("teacher_dataset", e))?;
        }
        self.teacher.validate().map_err(|e| named("teacher", e))?;
        self.student.validate().map_err(|e| named("student", e))?;
        check_switch_compatible(&self.teacher, &self.student).map_err(|e| named("student", e))?;
        for (what, spec) in [("dataset", Some(&self.dataset)), ("teacher_dataset", self.teacher_dataset.as_ref())] {
            if let Some(spec) = spec {
                if spec.image_size != self.student.image_size {
                    return Err(CliError::Config(format!(
                        "{what}.image_size {:?} does not match the models' {:?}",
                        spec.image_size, self.student.image_size
                    )));
                }
            }
        }
        self.teacher_training.pt.validate("teacher_training.pt").map_err(|e| named("teacher_training", e))?;
        self.teacher_training.sft.validate("teacher_training.sft").map_err(|e| named("teacher_training", e))?;
        self.distill.validate().map_err(|e| named("distill", e))?;
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        let a = &self.ablate;
        if a.strategies.is_empty() || a.switch.is_empty() || a.schemes.is_empty() {
            return Err(CliError::Config("every ablate axis needs at least one value".into()));
        }
        Ok(())
    }

    /// Spec of the data the teacher trains on.
    pub fn teacher_data(&self) -> &DatasetSpec {
        self.teacher_dataset.as_ref().unwrap_or(&self.dataset)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn teacher_data_dir(&self) -> PathBuf {
        if self.teacher_dataset.is_some() {
            self.out.join("teacher-data")
        } else {
            self.data_dir()
        }
    }

    /// Checkpoint path prefix of the teacher (`.json` manifest plus `.bin` blob).
    pub fn teacher_checkpoint(&self) -> PathBuf {
        self.out.join("teacher").join("teacher.json")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.out.join("runs")
    }
}
