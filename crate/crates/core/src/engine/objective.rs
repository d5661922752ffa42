use serde::{Deserialize, Serialize};

use super::config::{DistillConfig, DistillPositions, StageSpec};
use crate::autodiff::{Tape, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::sequence_loss_on_tape;
use crate::model::{check_switch_compatible, switch_forward_on_tape, BatchInputs, BoundVlm, ModelConfig, ToyVLM, Trainable};

/// A batch in teacher-forcing layout: one text row per input position, samples
/// concatenated in order.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub inputs: BatchInputs,
    /// Next-token target of every row.
    pub targets: Vec<usize>,
    /// Rows that predict an answer token.
    pub answer_mask: Vec<bool>,
    pub sample_ids: Vec<u64>,
}

impl PreparedBatch {
    pub fn new(cfg: &ModelConfig, samples: &[&Sample]) -> Result<Self> {
        let mut texts = Vec::with_capacity(samples.len());
        let mut targets = Vec::new();
        let mut answer_mask = Vec::new();
        for s in samples {
            let input = s.input_tokens();
            let full: Vec<usize> = s.prompt.iter().chain(&s.answer).copied().collect();
            targets.extend_from_slice(&full[1..]);
            answer_mask.extend(s.answer_mask());
            texts.push(input);
        }
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        Ok(Self {
            inputs: BatchInputs::new(cfg, &images, texts)?,
            targets,
            answer_mask,
            sample_ids: samples.iter().map(|s| s.id).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.targets.len()
    }
}

/// Mean negative log-likelihood of `targets` on the masked rows of `[T×N]` logits.
pub fn ce_loss_on_tape(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool], temperature: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || mask.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "logits {shape:?} for {} targets and mask of {}",
            targets.len(),
            mask.len()
        )));
    }
    let n = shape[1];
    let picks: Vec<usize> = targets
        .iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (_, &m))| m)
        .map(|(r, (&t, _))| {
            if t >= n {
                Err(Error::Bounds { index: t, len: n })
            } else {
                Ok(r * n + t)
            }
        })
        .collect::<Result<_>>()?;
    if picks.is_empty() {
        return Err(Error::Contract("CE mask selects no positions".into()));
    }
    let logp = tape.log_softmax(logits, temperature)?;
    let chosen = tape.gather(logp, &picks)?;
    let mean = tape.mean(chosen)?;
    tape.scale(mean, -1.0)
}

/// Value of [`ce_loss_on_tape`] on plain row-major logits.
pub fn ce_loss(logits: &[f64], vocab: usize, targets: &[usize], mask: &[bool]) -> Result<f64> {
    if vocab == 0 || logits.len() != targets.len() * vocab {
        return Err(Error::Dimension(format!(
            "{} logits for {} targets over vocab {vocab}",
            logits.len(),
            targets.len()
        )));
    }
    let mut tape = Tape::new();
    let z = tape.constant(vec![targets.len(), vocab], logits.to_vec())?;
    let out = ce_loss_on_tape(&mut tape, z, targets, mask, 1.0)?;
    Ok(tape.scalar(out))
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_align: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_vsd: Option<f64>,
    pub total: f64,
}

/// Tape handles of one objective evaluation.
#[derive(Debug, Clone)]
pub struct ObjectiveVars {
    pub student: BoundVlm,
    pub teacher: Option<BoundVlm>,
    pub student_logits: Var,
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Records `L = w_ce·L_CE + λ1·L_Align + λ2·L_VSD` for one batch.
///
/// `L_Align` is present when the stage distills and `L_VSD` when a distilling
/// fine-tuning stage runs with the switch enabled. A term whose weight is zero is still
/// evaluated for the breakdown but kept out of the graph of `total`, so the
/// gradient equals that of the remaining terms exactly. The teacher is bound as
/// constants and its logits never carry gradient.
pub fn record_objective(
    tape: &mut Tape,
    student: &ToyVLM,
    teacher: Option<&ToyVLM>,
    batch: &PreparedBatch,
    stage: &StageSpec,
    cfg: &DistillConfig,
) -> Result<ObjectiveVars> {
    if stage.distill && teacher.is_none() {
        return Err(Error::Contract(format!("stage {} distills but no teacher was given", stage.name)));
    }
    let sb = student.bind(tape, stage.trainable);
    let zs = student.forward_on_tape(tape, &sb, &batch.inputs)?;
    let ce_temp = if cfg.ce_uses_tau { cfg.tau } else { 1.0 };
    let ce = ce_loss_on_tape(tape, zs, &batch.targets, &batch.answer_mask, ce_temp)?;

    let mut weighted = Vec::new();
    if cfg.ce_weight > 0.0 {
        weighted.push(if cfg.ce_weight == 1.0 { ce } else { tape.scale(ce, cfg.ce_weight)? });
    }
    let mut align = None;
    let mut vsd = None;
    let mut tb = None;
    if let (true, Some(teacher)) = (stage.distill, teacher) {
        check_switch_compatible(&teacher.config, &student.config)?;
        let bound = teacher.bind(tape, Trainable::NONE);
        let zt = teacher.forward_on_tape(tape, &bound, &batch.inputs)?;
        let mask: Vec<bool> = match cfg.distill_positions {
            DistillPositions::Answer => batch.answer_mask.clone(),
            DistillPositions::All => vec![true; batch.rows()],
        };
        let loss_cfg = cfg.loss_config();
        let l_align = sequence_loss_on_tape(tape, &loss_cfg, zt, zs, &mask)?;
        align = Some(l_align);
        if cfg.lambda1 > 0.0 {
            weighted.push(tape.scale(l_align, cfg.lambda1)?);
        }
        if cfg.switch_enabled && !stage.name.is_pretraining() {
            let zsw = switch_forward_on_tape(tape, student, &sb.vision, teacher, &bound, &batch.inputs)?;
            let l_vsd = sequence_loss_on_tape(tape, &loss_cfg, zt, zsw, &mask)?;
            vsd = Some(l_vsd);
            if cfg.lambda2 > 0.0 {
                weighted.push(tape.scale(l_vsd, cfg.lambda2)?);
            }
        }
        tb = Some(bound);
    }
    let total = match weighted.split_first() {
        None => tape.scale(ce, 0.0)?,
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = tape.add(acc, t)?;
            }
            acc
        }
    };
    let breakdown = LossBreakdown {
        l_ce: tape.scalar(ce),
        l_align: align.map(|v| tape.scalar(v)),
        l_vsd: vsd.map(|v| tape.scalar(v)),
        total: tape.scalar(total),
    };
    Ok(ObjectiveVars {
        student: sb,
        teacher: tb,
        student_logits: zs,
        total,
        breakdown,
    })
}

/// Objective value without recording gradients.
pub fn total_loss(
    teacher: Option<&ToyVLM>,
    student: &ToyVLM,
    batch: &PreparedBatch,
    stage: &StageSpec,
    cfg: &DistillConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let frozen = StageSpec {
        trainable: Trainable::NONE,
        ..*stage
    };
    Ok(record_objective(&mut tape, student, teacher, batch, &frozen, cfg)?.breakdown)
}
