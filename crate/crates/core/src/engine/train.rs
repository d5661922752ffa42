use serde::{Deserialize, Serialize};

use super::config::{DistillConfig, Scheme, StageName, StageSpec};
use super::eval::{evaluate, EvalReport};
use super::objective::{record_objective, PreparedBatch};
use super::optim::{learning_rate, AdamW};
use crate::autodiff::Tape;
use crate::data::{batch_indices, Sample};
use crate::error::{Error, Result};
use crate::model::ToyVLM;

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: StageName,
    /// 1-based step within the stage.
    pub step: usize,
    pub l_ce: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_align: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_vsd: Option<f64>,
    pub total: f64,
    pub lr: f64,
    /// Present on the last step of each epoch.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_accuracy: Option<f64>,
}

/// Optimizer state and metrics of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: StageSpec,
    pub step: usize,
    pub optimizer: AdamW,
    pub log: Vec<LogRecord>,
    /// Sum over steps of the squared gradient norm that reached teacher parameters.
    pub teacher_grad_sq: f64,
}

/// Seed of the shuffle order for one epoch. Stages of the same family (PT/DPT or
/// SFT/DFT) see the same batch order, so schemes differ only in their objective.
fn epoch_seed(seed: u64, stage: StageName, epoch: usize) -> u64 {
    let tag: u64 = if stage.is_pretraining() { 1 } else { 2 };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tag << 56) ^ (epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Trains `student` for one stage. `teacher` must be present exactly when the stage distills.
///
/// Only groups flagged trainable by the stage are updated. Every step checks that
/// no gradient reached the teacher and aborts on a non-finite loss with a
/// description of the offending batch.
pub fn train_stage(
    student: &mut ToyVLM,
    teacher: Option<&ToyVLM>,
    train: &[Sample],
    val: &[Sample],
    stage: StageSpec,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<TrainState> {
    cfg.validate()?;
    if stage.distill != teacher.is_some() {
        return Err(Error::Contract(format!(
            "stage {} {} a teacher",
            stage.name,
            if stage.distill { "requires" } else { "must not receive" }
        )));
    }
    let hyper = *cfg.hyper(stage.name);
    let batches_per_epoch = train.len().div_ceil(hyper.batch_size);
    let total_steps = batches_per_epoch * hyper.epochs;
    student.trainable = stage.trainable;
    let mut state = TrainState {
        stage,
        step: 0,
        optimizer: AdamW::default(),
        log: Vec::new(),
        teacher_grad_sq: 0.0,
    };
    for epoch in 0..hyper.epochs {
        let order = batch_indices(train.len(), hyper.batch_size, Some(epoch_seed(seed, stage.name, epoch)))?;
        let n_batches = order.len();
        for (b, idx) in order.into_iter().enumerate() {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = PreparedBatch::new(&student.config, &samples)?;
            let lr = learning_rate(&hyper, state.step, total_steps);

            let mut tape = Tape::new();
            let vars = record_objective(&mut tape, student, teacher, &batch, &stage, cfg)?;
            let br = vars.breakdown;
            if !br.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: state.step + 1,
                    dump: format!(
                        "stage {} batch {:?}: prompts {:?}, l_ce {}, l_align {:?}, l_vsd {:?}",
                        stage.name, batch.sample_ids, batch.inputs.texts, br.l_ce, br.l_align, br.l_vsd
                    ),
                });
            }
            if stage.trainable.any() && tape.requires_grad(vars.total) {
                tape.backward(vars.total)?;
            }
            if let Some(tb) = &vars.teacher {
                let mut sq = 0.0;
                for v in tb.vision.list().into_iter().chain(tb.projector.list()).chain(tb.language.list()) {
                    if let Some(g) = tape.grad(v) {
                        sq += g.iter().map(|x| x * x).sum::<f64>();
                    }
                }
                state.teacher_grad_sq += sq;
                if sq != 0.0 {
                    return Err(Error::Contract(format!("teacher received gradient (norm² {sq}) at step {}", state.step + 1)));
                }
            }
            student.zero_grad();
            student.accumulate_grads(&tape, &vars.student)?;
            state.optimizer.step(student, stage.trainable, lr, hyper.weight_decay, cfg.grad_clip);
            student.zero_grad();
            state.step += 1;

            let val_accuracy = if b + 1 == n_batches && !val.is_empty() {
                Some(evaluate(student, val, None)?.accuracy)
            } else {
                None
            };
            state.log.push(LogRecord {
                stage: stage.name,
                step: state.step,
                l_ce: br.l_ce,
                l_align: br.l_align,
                l_vsd: br.l_vsd,
                total: br.total,
                lr,
                val_accuracy,
            });
        }
    }
    Ok(state)
}

/// Outcome of a full scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeReport {
    pub scheme: Scheme,
    pub stages: Vec<TrainState>,
    pub eval: EvalReport,
}

impl SchemeReport {
    /// Concatenated run log of all stages.
    pub fn log(&self) -> Vec<LogRecord> {
        self.stages.iter().flat_map(|s| s.log.iter().cloned()).collect()
    }

    pub fn last_record(&self) -> Option<&LogRecord> {
        self.stages.last().and_then(|s| s.log.last())
    }
}

/// Runs both stages of `cfg.scheme` on `student` and evaluates it on `val`,
/// reporting agreement with `teacher`.
pub fn run_scheme(
    teacher: &ToyVLM,
    student: &mut ToyVLM,
    train: &[Sample],
    val: &[Sample],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<SchemeReport> {
    let mut stages = Vec::new();
    for stage in cfg.scheme.stages() {
        let t = stage.distill.then_some(teacher);
        stages.push(train_stage(student, t, train, val, stage, cfg, seed)?);
    }
    let eval = evaluate(student, val, Some(teacher))?;
    Ok(SchemeReport {
        scheme: cfg.scheme,
        stages,
        eval,
    })
}
