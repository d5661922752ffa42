//! Logits-level distillation losses.
//!
//! The main objective is the dynamic bi-directional logits-difference loss (DBiLD):
//! two branches, one led by the teacher's top-k logits and one led by the student's,
//! each comparing temperature-softmaxed pairwise differences of the selected logits.
//! `k` comes from [`knee_index`](crate::knee::knee_index) per row. The ablation
//! baselines (full-vocabulary FKL/RKL, fixed-k BiLD, DBiLD with forward KL) share the
//! same building blocks.
//!
//! All losses are recorded on a [`Tape`] so the student side is differentiable. The
//! teacher side is always detached. Plain-slice wrappers build a throwaway tape.
//!
//! Divergence convention: `D_RKL[p ‖ q] = Σ q log(q / p)` where `p` is always the
//! teacher-side distribution and `q` the student-side one, so the student is the
//! mode-seeking mover in both branches. Flipping the convention only touches
//! [`Divergence`] handling in [`divergence_on_tape`].

mod strategy;

pub use strategy::{Divergence, LossStrategy, StrategyKind, DEFAULT_FIXED_K};

use crate::autodiff::{kernels, sort_descending_indices, Tape, Var};
use crate::error::{Error, Result};
use crate::knee::{knee_index, DEFAULT_K_CAP, MIN_K};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default distillation temperature.
pub const DEFAULT_TAU: f64 = 3.0;

/// One next-token logits vector; entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsRow(Vec<f64>);

impl LogitsRow {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_row(&values)?;
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for LogitsRow {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn check_row(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("logits must be finite".into()));
    }
    Ok(())
}

/// The leader's top-k logits and the follower's values at the same vocabulary positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedPair {
    pub indices: Vec<usize>,
    /// Leader values, non-increasing.
    pub led: Vec<f64>,
    /// Follower values at `indices`.
    pub cor: Vec<f64>,
}

/// Pairwise differences of selected logits and their temperature softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceDistribution {
    pub differences: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// How many leader logits a branch selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Knee-point cutoff, capped at `k_cap`.
    Knee { k_cap: usize },
    /// Fixed `k`, clamped to the row length.
    Fixed(usize),
}

/// Which model's ranking picks the indices of a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leader {
    Teacher,
    Student,
}

/// Everything a loss needs besides the logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub strategy: LossStrategy,
    pub tau: f64,
    pub k_cap: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            strategy: LossStrategy::default(),
            tau: DEFAULT_TAU,
            k_cap: DEFAULT_K_CAP,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.k_cap < MIN_K {
            return Err(Error::Config(format!("k_cap must be >= 2, got {}", self.k_cap)));
        }
        self.strategy.validate()
    }
}

/// Selects `leader`'s top-k positions (descending, ties by index) and reads both rows there.
pub fn select_led_cor(leader: &[f64], follower: &[f64], k: usize) -> Result<SelectedPair> {
    if leader.len() != follower.len() {
        return Err(Error::Dimension(format!(
            "leader has {} logits, follower {}",
            leader.len(),
            follower.len()
        )));
    }
    if k < MIN_K || k > leader.len() {
        return Err(Error::Contract(format!(
            "k must lie in [2, {}], got {k}",
            leader.len()
        )));
    }
    let mut indices = sort_descending_indices(leader);
    indices.truncate(k);
    Ok(SelectedPair {
        led: indices.iter().map(|&i| leader[i]).collect(),
        cor: indices.iter().map(|&i| follower[i]).collect(),
        indices,
    })
}

/// `[v_m - v_n for m < n]` in lexicographic pair order; length `k(k-1)/2`.
pub fn pairwise_differences(v: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(vec![v.len().max(1)], v.to_vec())?;
    let d = tape.pairwise_differences(x)?;
    Ok(tape.value(d).to_vec())
}

/// `softmax(d / tau)`.
pub fn difference_distribution(d: &[f64], tau: f64) -> Result<Vec<f64>> {
    if d.is_empty() {
        return Err(Error::Contract("empty difference vector".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(vec![d.len()], d.to_vec())?;
    let p = tape.softmax(x, tau)?;
    Ok(tape.value(p).to_vec())
}

fn divergence_values(p_ref: &[f64], q: &[f64], div: Divergence) -> Result<f64> {
    if p_ref.len() != q.len() {
        return Err(Error::Dimension(format!(
            "distributions of length {} and {}",
            p_ref.len(),
            q.len()
        )));
    }
    if p_ref.is_empty() {
        return Err(Error::Contract("empty distribution".into()));
    }
    let mut tape = Tape::new();
    let p = tape.constant(vec![p_ref.len()], p_ref.to_vec())?;
    let qv = tape.constant(vec![q.len()], q.to_vec())?;
    let out = divergence_on_tape(&mut tape, p, qv, div)?;
    Ok(tape.scalar(out))
}

/// `D_RKL[p_ref ‖ q] = Σ q log(q / p_ref)`.
pub fn rkl(p_ref: &[f64], q: &[f64]) -> Result<f64> {
    divergence_values(p_ref, q, Divergence::Reverse)
}

/// `D_FKL[p_ref ‖ q] = Σ p_ref log(p_ref / q)`.
pub fn fkl(p_ref: &[f64], q: &[f64]) -> Result<f64> {
    divergence_values(p_ref, q, Divergence::Forward)
}

/// KL divergence between teacher-side `p` and student-side `q`, both floored at
/// [`PROB_FLOOR`] before the log.
pub fn divergence_on_tape(tape: &mut Tape, p: Var, q: Var, div: Divergence) -> Result<Var> {
    let p_floor = tape.clamp_min(p, PROB_FLOOR)?;
    let q_floor = tape.clamp_min(q, PROB_FLOOR)?;
    let log_p = tape.log(p_floor)?;
    let log_q = tape.log(q_floor)?;
    let (weight, ratio) = match div {
        Divergence::Reverse => (q, tape.sub(log_q, log_p)?),
        Divergence::Forward => (p, tape.sub(log_p, log_q)?),
    };
    let terms = tape.mul(weight, ratio)?;
    tape.sum(terms)
}

fn selected_indices(leader: &[f64], selection: Selection) -> Result<Vec<usize>> {
    match selection {
        Selection::Knee { k_cap } => {
            let knee = knee_index(leader, k_cap)?;
            let mut idx = knee.sorted_indices;
            idx.truncate(knee.k);
            Ok(idx)
        }
        Selection::Fixed(k) => {
            if k < MIN_K {
                return Err(Error::Contract(format!("fixed k must be >= 2, got {k}")));
            }
            let mut idx = sort_descending_indices(leader);
            idx.truncate(k.min(leader.len()));
            Ok(idx)
        }
    }
}

/// Intermediate values of one branch, for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchTrace {
    pub k: usize,
    pub pair: SelectedPair,
    pub teacher: DifferenceDistribution,
    pub student: DifferenceDistribution,
    pub value: f64,
}

struct BranchVars {
    loss: Var,
    indices: Vec<usize>,
    teacher_sel: Var,
    student_sel: Var,
    teacher_diff: Var,
    student_diff: Var,
    teacher_prob: Var,
    student_prob: Var,
}

fn branch_vars(
    tape: &mut Tape,
    leader: Leader,
    teacher: Var,
    student: Var,
    selection: Selection,
    tau: f64,
    div: Divergence,
) -> Result<BranchVars> {
    if tape.shape(teacher) != tape.shape(student) {
        return Err(Error::Dimension(format!(
            "teacher logits {:?} vs student logits {:?}",
            tape.shape(teacher),
            tape.shape(student)
        )));
    }
    if tape.array(teacher).numel() < MIN_K {
        return Err(Error::Contract("need at least two logits".into()));
    }
    check_row(tape.value(teacher))?;
    check_row(tape.value(student))?;
    let teacher = if tape.requires_grad(teacher) {
        tape.detach(teacher)
    } else {
        teacher
    };
    let leader_values = match leader {
        Leader::Teacher => tape.value(teacher),
        Leader::Student => tape.value(student),
    };
    let indices = selected_indices(leader_values, selection)?;
    let teacher_sel = tape.gather(teacher, &indices)?;
    let student_sel = tape.gather(student, &indices)?;
    let teacher_diff = tape.pairwise_differences(teacher_sel)?;
    let student_diff = tape.pairwise_differences(student_sel)?;
    let teacher_prob = tape.softmax(teacher_diff, tau)?;
    let student_prob = tape.softmax(student_diff, tau)?;
    let loss = divergence_on_tape(tape, teacher_prob, student_prob, div)?;
    Ok(BranchVars {
        loss,
        indices,
        teacher_sel,
        student_sel,
        teacher_diff,
        student_diff,
        teacher_prob,
        student_prob,
    })
}

/// One difference-alignment branch on the tape.
///
/// The teacher-led branch compares `p_led^t` with `p_cor^s`; the student-led branch
/// compares `p_cor^t` with `p_led^s`. In both the teacher-side distribution is the
/// first divergence argument.
pub fn branch_on_tape(
    tape: &mut Tape,
    leader: Leader,
    teacher: Var,
    student: Var,
    selection: Selection,
    tau: f64,
    div: Divergence,
) -> Result<Var> {
    Ok(branch_vars(tape, leader, teacher, student, selection, tau, div)?.loss)
}

/// Per-row loss for any strategy.
pub fn row_loss_on_tape(tape: &mut Tape, cfg: &LossConfig, teacher: Var, student: Var) -> Result<Var> {
    let kind = cfg.strategy.kind;
    let div = kind.divergence();
    let selection = match kind {
        StrategyKind::Fkl | StrategyKind::Rkl => {
            return vocabulary_kl_on_tape(tape, teacher, student, cfg.tau, div);
        }
        StrategyKind::BildFkl | StrategyKind::BildRkl => Selection::Fixed(cfg.strategy.fixed_k),
        StrategyKind::DbildFkl | StrategyKind::DbildRkl => Selection::Knee { k_cap: cfg.k_cap },
    };
    let lt = branch_on_tape(tape, Leader::Teacher, teacher, student, selection, cfg.tau, div)?;
    let ls = branch_on_tape(tape, Leader::Student, teacher, student, selection, cfg.tau, div)?;
    tape.add(lt, ls)
}

/// KL between full-vocabulary temperature softmaxes.
pub fn vocabulary_kl_on_tape(tape: &mut Tape, teacher: Var, student: Var, tau: f64, div: Divergence) -> Result<Var> {
    if tape.shape(teacher) != tape.shape(student) {
        return Err(Error::Dimension(format!(
            "teacher logits {:?} vs student logits {:?}",
            tape.shape(teacher),
            tape.shape(student)
        )));
    }
    let teacher = if tape.requires_grad(teacher) {
        tape.detach(teacher)
    } else {
        teacher
    };
    let p = tape.softmax(teacher, tau)?;
    let q = tape.softmax(student, tau)?;
    divergence_on_tape(tape, p, q, div)
}

/// Mean per-row loss over the rows of `[T×N]` logits where `mask` is set.
pub fn sequence_loss_on_tape(
    tape: &mut Tape,
    cfg: &LossConfig,
    teacher: Var,
    student: Var,
    mask: &[bool],
) -> Result<Var> {
    if tape.shape(teacher) != tape.shape(student) || tape.shape(teacher).len() != 2 {
        return Err(Error::Dimension(format!(
            "sequence logits must be equal-shaped matrices, got {:?} and {:?}",
            tape.shape(teacher),
            tape.shape(student)
        )));
    }
    let (rows, cols) = (tape.shape(teacher)[0], tape.shape(teacher)[1]);
    if mask.len() != rows {
        return Err(Error::Dimension(format!("mask of {} for {rows} positions", mask.len())));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract("mask selects no positions".into()));
    }
    let mut per_row = Vec::new();
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let cols_idx: Vec<usize> = (r * cols..(r + 1) * cols).collect();
        let t = tape.gather(teacher, &cols_idx)?;
        let s = tape.gather(student, &cols_idx)?;
        per_row.push(row_loss_on_tape(tape, cfg, t, s)?);
    }
    let stacked = tape.concat(&per_row)?;
    tape.mean(stacked)
}

fn row_pair(tape: &mut Tape, z_t: &[f64], z_s: &[f64]) -> Result<(Var, Var)> {
    if z_t.len() != z_s.len() {
        return Err(Error::Dimension(format!(
            "teacher has {} logits, student {}",
            z_t.len(),
            z_s.len()
        )));
    }
    if z_t.is_empty() {
        return Err(Error::Contract("empty logits".into()));
    }
    let t = tape.constant(vec![z_t.len()], z_t.to_vec())?;
    let s = tape.constant(vec![z_s.len()], z_s.to_vec())?;
    Ok((t, s))
}

/// Runs one branch on plain slices and returns every intermediate.
pub fn branch_trace(
    leader: Leader,
    z_t: &[f64],
    z_s: &[f64],
    selection: Selection,
    tau: f64,
    div: Divergence,
) -> Result<BranchTrace> {
    let mut tape = Tape::new();
    let (t, s) = row_pair(&mut tape, z_t, z_s)?;
    let b = branch_vars(&mut tape, leader, t, s, selection, tau, div)?;
    let (led, cor) = match leader {
        Leader::Teacher => (b.teacher_sel, b.student_sel),
        Leader::Student => (b.student_sel, b.teacher_sel),
    };
    Ok(BranchTrace {
        k: b.indices.len(),
        pair: SelectedPair {
            indices: b.indices,
            led: tape.value(led).to_vec(),
            cor: tape.value(cor).to_vec(),
        },
        teacher: DifferenceDistribution {
            differences: tape.value(b.teacher_diff).to_vec(),
            probabilities: tape.value(b.teacher_prob).to_vec(),
        },
        student: DifferenceDistribution {
            differences: tape.value(b.student_diff).to_vec(),
            probabilities: tape.value(b.student_prob).to_vec(),
        },
        value: tape.scalar(b.loss),
    })
}

/// Teacher-led DBiLD branch `L_t`.
pub fn teacher_guided_loss(z_t: &[f64], z_s: &[f64], tau: f64, k_cap: usize) -> Result<f64> {
    let sel = Selection::Knee { k_cap };
    Ok(branch_trace(Leader::Teacher, z_t, z_s, sel, tau, Divergence::Reverse)?.value)
}

/// Student-led DBiLD branch `L_s`.
pub fn student_guided_loss(z_t: &[f64], z_s: &[f64], tau: f64, k_cap: usize) -> Result<f64> {
    let sel = Selection::Knee { k_cap };
    Ok(branch_trace(Leader::Student, z_t, z_s, sel, tau, Divergence::Reverse)?.value)
}

/// `L_DBiLD = L_t + L_s` for one pair of logits rows.
pub fn dbild_loss(z_t: &[f64], z_s: &[f64], tau: f64, k_cap: usize) -> Result<f64> {
    let cfg = LossConfig {
        strategy: LossStrategy::new(StrategyKind::DbildRkl),
        tau,
        k_cap,
    };
    baseline_loss(&cfg, z_t, z_s)
}

/// Value of any strategy on one pair of logits rows.
pub fn baseline_loss(cfg: &LossConfig, z_t: &[f64], z_s: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let (t, s) = row_pair(&mut tape, z_t, z_s)?;
    let out = row_loss_on_tape(&mut tape, cfg, t, s)?;
    Ok(tape.scalar(out))
}

/// Mean per-position loss over masked rows of row-major `[T×N]` logits.
pub fn sequence_loss(cfg: &LossConfig, teacher: &[f64], student: &[f64], vocab: usize, mask: &[bool]) -> Result<f64> {
    if vocab == 0 || teacher.len() % vocab != 0 || teacher.len() != student.len() {
        return Err(Error::Dimension(format!(
            "logits of length {} and {} do not form [T x {vocab}] matrices",
            teacher.len(),
            student.len()
        )));
    }
    let rows = teacher.len() / vocab;
    let mut tape = Tape::new();
    let t = tape.constant(vec![rows, vocab], teacher.to_vec())?;
    let s = tape.constant(vec![rows, vocab], student.to_vec())?;
    let out = sequence_loss_on_tape(&mut tape, cfg, t, s, mask)?;
    Ok(tape.scalar(out))
}

/// Temperature softmax on a plain slice (max-subtracted).
pub fn softmax(z: &[f64], tau: f64) -> Vec<f64> {
    kernels::softmax(z, tau)
}
