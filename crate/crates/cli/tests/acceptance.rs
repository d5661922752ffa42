//! Acceptance suite: one PASS/FAIL line per criterion, every tolerance pinned here.
//!
//! Criteria 1-7 run in-process against oracles defined in this file. Criteria 8-10
//! drive the `switchkd` binary in scratch directories. The process exits 0 so the
//! workspace test run reports the table; set `SWITCHKD_ACCEPTANCE_STRICT=1` to
//! exit 1 on any FAIL. Set `SWITCHKD_ACCEPTANCE_DIR` to keep the artifacts of the
//! binary-driven criteria.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use switchkd_cli::report::{read_rows, RowKind, COLUMNS};
use switchkd_core::autodiff::Tape;
use switchkd_core::data::{generate, DatasetSpec, Sample, Task};
use switchkd_core::engine::{
    record_objective, total_loss, train_stage, DistillConfig, PreparedBatch, StageHyper, StageName, StageSpec,
};
use switchkd_core::knee::knee_index;
use switchkd_core::loss::{
    baseline_loss, branch_trace, dbild_loss, row_loss_on_tape, Divergence, Leader, LossConfig, LossStrategy, Selection,
    StrategyKind,
};
use switchkd_core::model::{switch_forward, switch_forward_on_tape, Group, ModelConfig, ToyVLM, Trainable};
use switchkd_core::verify::{tiny_configs, tiny_samples};

const BIN: &str = env!("CARGO_BIN_EXE_switchkd");

// Pinned tolerances and sizes.
const KNEE_VECTORS: usize = 1000;
const KNEE_TIME_LIMIT_S: f64 = 10.0;
const DBILD_PAIRS: usize = 200;
const DBILD_ORACLE_TOL: f64 = 1e-10;
const ZERO_TOL: f64 = 1e-10;
const NONNEG_TOL: f64 = -1e-12;
const SHIFT_TRIPLES: usize = 500;
const GRAD_INSTANCES: usize = 50;
const GRAD_REL: f64 = 1e-4;
const GRAD_ABS: f64 = 1e-6;
const FD_EPS: f64 = 1e-5;
const FROZEN_STEPS: usize = 100;
const EXPERIMENT_SEEDS: [u64; 3] = [0, 1, 2];
const TEACHER_MIN_ACCURACY: f64 = 0.95;
const EXPERIMENT_BUDGET_S: f64 = 30.0 * 60.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

mod oracle {
    //! Straight-line reimplementations with their own sort, normalization and softmax.

    pub fn descending(z: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..z.len()).collect();
        idx.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap().then(a.cmp(&b)));
        idx
    }

    /// Brute-force knee: evaluate every rank's distance below `1 - x` and take the
    /// smallest rank within 1e-12 of the maximum.
    pub fn knee(z: &[f64], cap: usize) -> usize {
        let n = z.len();
        let idx = descending(z);
        let (hi, lo) = (z[idx[0]], z[idx[n - 1]]);
        if hi == lo {
            return 2;
        }
        let mut d = Vec::with_capacity(n);
        for (r, &i) in idx.iter().enumerate() {
            let x = (r + 1) as f64 / n as f64;
            let y = (z[i] - lo) / (hi - lo);
            d.push((1.0 - x) - y);
        }
        let mut best = f64::NEG_INFINITY;
        for &v in &d {
            best = best.max(v);
        }
        let rank = d.iter().position(|&v| v >= best - 1e-12).unwrap();
        (rank + 1).clamp(2, n.min(cap))
    }

    fn diff_softmax(v: &[f64], tau: f64) -> Vec<f64> {
        let mut d = Vec::new();
        for a in 0..v.len() {
            for b in a + 1..v.len() {
                d.push((v[a] - v[b]) / tau);
            }
        }
        let m = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = d.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }

    fn rkl(p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(q).map(|(&p, &q)| q * (q.max(1e-12).ln() - p.max(1e-12).ln())).sum()
    }

    fn branch(leader: &[f64], zt: &[f64], zs: &[f64], tau: f64, cap: usize) -> f64 {
        let k = knee(leader, cap);
        let sel = &descending(leader)[..k];
        let t: Vec<f64> = sel.iter().map(|&i| zt[i]).collect();
        let s: Vec<f64> = sel.iter().map(|&i| zs[i]).collect();
        rkl(&diff_softmax(&t, tau), &diff_softmax(&s, tau))
    }

    /// Teacher-led plus student-led branch.
    pub fn dbild(zt: &[f64], zs: &[f64], tau: f64, cap: usize) -> f64 {
        branch(zt, zt, zs, tau, cap) + branch(zs, zt, zs, tau, cap)
    }
}

fn logits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    match rng.gen_range(0..4) {
        0 => (0..n).map(|_| rng.gen_range(-8.0..8.0)).collect(),
        1 => {
            let head = rng.gen_range(1..=6.min(n));
            (0..n)
                .map(|i| if i < head { rng.gen_range(4.0..12.0) } else { rng.gen_range(-1.0..1.0) })
                .collect()
        }
        2 => (0..n).map(|_| -rng.gen_range(1e-9f64..1.0).ln() * 2.0).collect(),
        _ => (0..n).map(|_| f64::from(rng.gen_range(-6i32..6)) * 0.5).collect(),
    }
}

fn grad_ok(a: f64, n: f64) -> bool {
    (a - n).abs() <= (GRAD_REL * a.abs().max(n.abs())).max(GRAD_ABS)
}

fn c1_knee_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut matches = 0;
    for case in 0..KNEE_VECTORS {
        let n = rng.gen_range(4..=512);
        let z = logits(&mut rng, n);
        let cap = if case % 10 == 0 { rng.gen_range(2..12) } else { 64 };
        if knee_index(&z, cap).map(|r| r.k).ok() == Some(oracle::knee(&z, cap)) {
            matches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        matches == KNEE_VECTORS && secs < KNEE_TIME_LIMIT_S,
        format!("{matches}/{KNEE_VECTORS} exact matches in {secs:.2} s (required: 100%, < {KNEE_TIME_LIMIT_S} s)"),
    )
}

fn c2_knee_affine() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut same = 0;
    for _ in 0..KNEE_VECTORS {
        let n = rng.gen_range(4..=512);
        let z = logits(&mut rng, n);
        let a = 10f64.powf(rng.gen_range(-1.0..1.0));
        let b = rng.gen_range(-50.0..50.0);
        let moved: Vec<f64> = z.iter().map(|v| a * v + b).collect();
        if knee_index(&z, 64).unwrap().k == knee_index(&moved, 64).unwrap().k {
            same += 1;
        }
    }
    outcome(same == KNEE_VECTORS, format!("{same}/{KNEE_VECTORS} identical cutoffs under a*z+b, a>0 (required: all)"))
}

fn c3_dbild_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst: f64 = 0.0;
    for case in 0..DBILD_PAIRS {
        let n = [8, 32, 128][case % 3];
        let zt = logits(&mut rng, n);
        let zs = logits(&mut rng, n);
        let got = dbild_loss(&zt, &zs, 3.0, 64).unwrap();
        worst = worst.max((got - oracle::dbild(&zt, &zs, 3.0, 64)).abs());
    }
    outcome(
        worst <= DBILD_ORACLE_TOL,
        format!("{DBILD_PAIRS} pairs, N in {{8, 32, 128}}, max |error| {worst:.2e} (tolerance {DBILD_ORACLE_TOL:.0e})"),
    )
}

fn c4_dbild_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut zero_worst: f64 = 0.0;
    let mut min_loss = f64::INFINITY;
    let mut bad_pairs = 0;
    let mut rows = 0;
    for case in 0..DBILD_PAIRS {
        let n = [8, 32, 128][case % 3];
        let zt = logits(&mut rng, n);
        let zs = logits(&mut rng, n);
        for kind in StrategyKind::ALL {
            let cfg = LossConfig {
                strategy: LossStrategy::new(kind),
                ..LossConfig::default()
            };
            zero_worst = zero_worst.max(baseline_loss(&cfg, &zt, &zt).unwrap().abs());
            min_loss = min_loss.min(baseline_loss(&cfg, &zt, &zs).unwrap());
        }
        for leader in [Leader::Teacher, Leader::Student] {
            let tr = branch_trace(leader, &zt, &zs, Selection::Knee { k_cap: 64 }, 3.0, Divergence::Reverse).unwrap();
            rows += 1;
            let want = tr.k * (tr.k - 1) / 2;
            if tr.teacher.differences.len() != want || tr.student.differences.len() != want {
                bad_pairs += 1;
            }
        }
    }
    // Shifts on a dyadic grid, where floating-point addition is exact.
    let grid = |rng: &mut ChaCha8Rng, r: i32| f64::from(rng.gen_range(-r..r)) / 1024.0;
    let mut shift_bad = 0;
    for case in 0..SHIFT_TRIPLES {
        let n = [8, 32, 128][case % 3];
        let zt: Vec<f64> = (0..n).map(|_| grid(&mut rng, 8192)).collect();
        let zs: Vec<f64> = (0..n).map(|_| grid(&mut rng, 8192)).collect();
        let (ct, cs) = (grid(&mut rng, 1 << 16), grid(&mut rng, 1 << 16));
        let base = dbild_loss(&zt, &zs, 3.0, 64).unwrap();
        let t: Vec<f64> = zt.iter().map(|v| v + ct).collect();
        let s: Vec<f64> = zs.iter().map(|v| v + cs).collect();
        let moved_t = dbild_loss(&t, &zs, 3.0, 64).unwrap();
        let moved_s = dbild_loss(&zt, &s, 3.0, 64).unwrap();
        if base.to_bits() != moved_t.to_bits() || base.to_bits() != moved_s.to_bits() {
            shift_bad += 1;
        }
    }
    let pass = zero_worst < ZERO_TOL && min_loss >= NONNEG_TOL && bad_pairs == 0 && shift_bad == 0;
    outcome(
        pass,
        format!(
            "max |L(z,z)| {zero_worst:.1e} (< {ZERO_TOL:.0e}); min L {min_loss:.2e} (>= {NONNEG_TOL:.0e}); \
             {shift_bad}/{SHIFT_TRIPLES} shift mismatches (bit-exact); {bad_pairs}/{rows} branches with length != k(k-1)/2"
        ),
    )
}

/// Loss and flattened student gradient of the objective.
fn objective_and_grad(
    student: &ToyVLM,
    teacher: Option<&ToyVLM>,
    batch: &PreparedBatch,
    stage: StageName,
    cfg: &DistillConfig,
) -> (f64, Vec<f64>) {
    let mut s = student.clone();
    let mut tape = Tape::new();
    let vars = record_objective(&mut tape, &s, teacher, batch, &StageSpec::new(stage), cfg).unwrap();
    tape.backward(vars.total).unwrap();
    s.zero_grad();
    s.accumulate_grads(&tape, &vars.student).unwrap();
    (vars.breakdown.total, s.flat_grads())
}

fn objective_value(student: &ToyVLM, teacher: Option<&ToyVLM>, batch: &PreparedBatch, stage: StageName, cfg: &DistillConfig) -> f64 {
    total_loss(teacher, student, batch, &StageSpec::new(stage), cfg).unwrap().total
}

/// Knee selections of every distilled student-side row (direct and switch pathway).
fn selections(student: &ToyVLM, teacher: &ToyVLM, batch: &PreparedBatch) -> Vec<Vec<usize>> {
    let mut tape = Tape::new();
    let sb = student.bind(&mut tape, Trainable::NONE);
    let tb = teacher.bind(&mut tape, Trainable::NONE);
    let zs = student.forward_on_tape(&mut tape, &sb, &batch.inputs).unwrap();
    let zw = switch_forward_on_tape(&mut tape, student, &sb.vision, teacher, &tb, &batch.inputs).unwrap();
    let v = student.config.vocab_size;
    let mut out = Vec::new();
    for z in [zs, zw] {
        let vals = tape.value(z);
        for (r, _) in batch.answer_mask.iter().enumerate().filter(|(_, &m)| m) {
            let k = knee_index(&vals[r * v..(r + 1) * v], 64).unwrap();
            out.push(k.sorted_indices[..k.k].to_vec());
        }
    }
    out
}

struct GradTally {
    instances: usize,
    coords: usize,
    failures: usize,
    worst: f64,
}

impl GradTally {
    fn new() -> Self {
        Self {
            instances: 0,
            coords: 0,
            failures: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, a: f64, n: f64) {
        self.coords += 1;
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(GRAD_ABS / GRAD_REL);
        self.worst = self.worst.max(rel);
        if !grad_ok(a, n) {
            self.failures += 1;
        }
    }

    fn summary(&self, name: &str) -> String {
        format!(
            "{name}: {} instances, {} coords, {} failures, max scaled error {:.1e}",
            self.instances, self.coords, self.failures, self.worst
        )
    }
}

/// Central-difference probe of a few coordinates per parameter group. Returns
/// `false` when a probe crosses a selection seam (the caller redraws).
#[allow(clippy::too_many_arguments)]
fn probe_params(
    student: &ToyVLM,
    teacher: Option<&ToyVLM>,
    batch: &PreparedBatch,
    stage: StageName,
    cfg: &DistillConfig,
    rng: &mut ChaCha8Rng,
    per_group: usize,
    tally: &mut GradTally,
) -> bool {
    let (_, grad) = objective_and_grad(student, teacher, batch, stage, cfg);
    let base = student.flat_values();
    let base_sel = teacher.map(|t| selections(student, t, batch));
    let mut pending = Vec::new();
    for g in [Group::Vision, Group::Projector, Group::Language] {
        let range = student.group_range(g);
        for off in rand::seq::index::sample(rng, range.len(), per_group.min(range.len())) {
            let i = range.start + off;
            let shifted = |delta: f64| {
                let mut m = student.clone();
                let mut w = base.clone();
                w[i] += delta;
                m.set_flat_values(&w).unwrap();
                m
            };
            let (hi, lo) = (shifted(FD_EPS), shifted(-FD_EPS));
            if let (Some(t), Some(sel)) = (teacher, &base_sel) {
                if selections(&hi, t, batch) != *sel || selections(&lo, t, batch) != *sel {
                    return false;
                }
            }
            let numeric = (objective_value(&hi, teacher, batch, stage, cfg) - objective_value(&lo, teacher, batch, stage, cfg))
                / (2.0 * FD_EPS);
            pending.push((grad[i], numeric));
        }
    }
    for (a, n) in pending {
        tally.record(a, n);
    }
    tally.instances += 1;
    true
}

fn c5_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    // DBiLD with respect to student logits.
    let mut dbild = GradTally::new();
    let mut attempts = 0;
    while dbild.instances < GRAD_INSTANCES && attempts < 20 * GRAD_INSTANCES {
        attempts += 1;
        let n = [8, 32, 128][dbild.instances % 3];
        let zt = logits(&mut rng, n);
        let zs: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let sel = |z: &[f64]| {
            let k = knee_index(z, 64).unwrap();
            k.sorted_indices[..k.k].to_vec()
        };
        let base = sel(&zs);
        let mut pairs = Vec::new();
        let mut stable = true;
        for i in 0..n {
            let (mut hi, mut lo) = (zs.clone(), zs.clone());
            hi[i] += FD_EPS;
            lo[i] -= FD_EPS;
            if sel(&hi) != base || sel(&lo) != base {
                stable = false;
                break;
            }
            pairs.push((dbild_loss(&zt, &hi, 3.0, 64).unwrap() - dbild_loss(&zt, &lo, 3.0, 64).unwrap()) / (2.0 * FD_EPS));
        }
        if !stable {
            continue;
        }
        let mut tape = Tape::new();
        let t = tape.constant(vec![n], zt.clone()).unwrap();
        let s = tape.variable(vec![n], zs.clone()).unwrap();
        let out = row_loss_on_tape(&mut tape, &LossConfig::default(), t, s).unwrap();
        tape.backward(out).unwrap();
        for (a, num) in tape.grad(s).unwrap().iter().zip(&pairs) {
            dbild.record(*a, *num);
        }
        dbild.instances += 1;
    }

    let (tc, sc) = tiny_configs();
    let dft = DistillConfig::default();
    let mut ce = GradTally::new();
    while ce.instances < GRAD_INSTANCES {
        let student = ToyVLM::new(sc, rng.gen()).unwrap();
        let samples = tiny_samples(&sc, &mut rng, 3);
        let batch = PreparedBatch::new(&sc, &samples.iter().collect::<Vec<_>>()).unwrap();
        probe_params(&student, None, &batch, StageName::Sft, &dft, &mut rng, 4, &mut ce);
    }
    let mut total = GradTally::new();
    attempts = 0;
    while total.instances < GRAD_INSTANCES && attempts < 20 * GRAD_INSTANCES {
        attempts += 1;
        let teacher = ToyVLM::new(tc, rng.gen()).unwrap();
        let student = ToyVLM::new(sc, rng.gen()).unwrap();
        let samples = tiny_samples(&sc, &mut rng, 3);
        let batch = PreparedBatch::new(&sc, &samples.iter().collect::<Vec<_>>()).unwrap();
        probe_params(&student, Some(&teacher), &batch, StageName::Dft, &dft, &mut rng, 4, &mut total);
    }
    let pass = [&dbild, &ce, &total].iter().all(|t| t.failures == 0 && t.instances >= GRAD_INSTANCES);
    outcome(
        pass,
        format!(
            "{}; {}; {} (tolerance {GRAD_REL:.0e} rel, {GRAD_ABS:.0e} abs, eps {FD_EPS:.0e})",
            dbild.summary("dbild"),
            ce.summary("ce"),
            total.summary("total")
        ),
    )
}

fn shape_data(n_train: usize, n_val: usize, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let d = generate(&DatasetSpec::new(n_train, n_val, seed, Task::ShapeAtPosition)).unwrap();
    (d.train, d.val)
}

fn c6_frozen_teacher_and_confinement() -> Outcome {
    let (tc, sc) = tiny_configs();
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let teacher = ToyVLM::new(tc, 7).unwrap();
    let before = teacher.flat_values();
    let mut student = ToyVLM::new(sc, 8).unwrap();
    let train = tiny_samples(&sc, &mut rng, 2 * FROZEN_STEPS);
    let cfg = DistillConfig {
        ft: StageHyper {
            learning_rate: 1e-2,
            batch_size: 2,
            epochs: 1,
            ..StageHyper::fine_tuning()
        },
        ..DistillConfig::default()
    };
    let state = train_stage(&mut student, Some(&teacher), &train, &[], StageSpec::new(StageName::Dft), &cfg, 0).unwrap();
    let unchanged = teacher.flat_values().iter().zip(&before).all(|(a, b)| a.to_bits() == b.to_bits());

    // Per-step check from outside the trainer: no gradient on any teacher handle.
    let mut outside_sq = 0.0;
    for chunk in train.chunks(2).take(10) {
        let batch = PreparedBatch::new(&sc, &chunk.iter().collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let vars = record_objective(&mut tape, &student, Some(&teacher), &batch, &StageSpec::new(StageName::Dft), &cfg).unwrap();
        tape.backward(vars.total).unwrap();
        let tb = vars.teacher.unwrap();
        for v in tb.vision.list().into_iter().chain(tb.projector.list()).chain(tb.language.list()) {
            outside_sq += tape.grad(v).map_or(0.0, |g| g.iter().map(|x| x * x).sum());
        }
    }

    let vsd_only = DistillConfig {
        ce_weight: 0.0,
        lambda1: 0.0,
        lambda2: 1.0,
        ..DistillConfig::default()
    };
    let (full_t, full_s) = (ModelConfig::teacher(), ModelConfig::student());
    let (data, _) = shape_data(60, 1, 61);
    let mut confined = 0;
    let cases = 20;
    for (i, chunk) in data.chunks(3).take(cases).enumerate() {
        let t = ToyVLM::new(full_t, 100 + i as u64).unwrap();
        let mut s = ToyVLM::new(full_s, 200 + i as u64).unwrap();
        let batch = PreparedBatch::new(&full_s, &chunk.iter().collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let vars = record_objective(&mut tape, &s, Some(&t), &batch, &StageSpec::new(StageName::Dft), &vsd_only).unwrap();
        tape.backward(vars.total).unwrap();
        s.accumulate_grads(&tape, &vars.student).unwrap();
        let [v, p, l] = [Group::Vision, Group::Projector, Group::Language].map(|g| s.grad_norm_sq(g));
        if v > 0.0 && p == 0.0 && l == 0.0 {
            confined += 1;
        }
    }
    let pass = state.step == FROZEN_STEPS && state.teacher_grad_sq == 0.0 && unchanged && outside_sq == 0.0 && confined == cases;
    outcome(
        pass,
        format!(
            "{}-step DFT run: teacher grad norm² {} (trainer) and {} (external, 10 batches), parameters {}; \
             L_VSD-only gradients confined to V in {confined}/{cases} (required: exactly 0, all)",
            state.step,
            state.teacher_grad_sq,
            outside_sq,
            if unchanged { "bit-identical" } else { "CHANGED" }
        ),
    )
}

fn c7_collapse() -> Outcome {
    let (full_t, full_s) = (ModelConfig::teacher(), ModelConfig::student());
    let (train, _) = shape_data(64, 1, 71);
    let teacher = ToyVLM::new(full_t, 1).unwrap();
    let student = ToyVLM::new(full_s, 2).unwrap();
    let hyper = StageHyper {
        learning_rate: 1e-3,
        batch_size: 16,
        epochs: 2,
        ..StageHyper::fine_tuning()
    };
    let zeroed = DistillConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ft: hyper,
        ..DistillConfig::default()
    };
    let (mut a, mut b) = (student.clone(), student.clone());
    let sft = train_stage(&mut a, None, &train, &[], StageSpec::new(StageName::Sft), &zeroed, 3).unwrap();
    let dft = train_stage(&mut b, Some(&teacher), &train, &[], StageSpec::new(StageName::Dft), &zeroed, 3).unwrap();
    let losses_identical = sft.log.len() == dft.log.len()
        && sft
            .log
            .iter()
            .zip(&dft.log)
            .all(|(x, y)| x.l_ce.to_bits() == y.l_ce.to_bits() && x.total.to_bits() == y.total.to_bits());
    let params_identical = a.flat_values().iter().zip(b.flat_values()).all(|(x, y)| x.to_bits() == y.to_bits());

    let clone = teacher.clone();
    let mut cloned_ok = 0;
    let mut switch_same = 0;
    let chunks: Vec<&[Sample]> = train.chunks(4).collect();
    for chunk in &chunks {
        let batch = PreparedBatch::new(&full_t, &chunk.iter().collect::<Vec<_>>()).unwrap();
        let br = total_loss(Some(&teacher), &clone, &batch, &StageSpec::new(StageName::Dft), &DistillConfig::default()).unwrap();
        if br.l_align == Some(0.0) && br.l_vsd == Some(0.0) {
            cloned_ok += 1;
        }
    }
    for s in &train {
        let zt = teacher.forward(&s.image, &s.prompt).unwrap();
        let zw = switch_forward(&clone, &teacher, &s.image, &s.prompt).unwrap();
        if zt.values().iter().zip(zw.values()).all(|(x, y)| x.to_bits() == y.to_bits()) {
            switch_same += 1;
        }
    }
    let pass = losses_identical && params_identical && cloned_ok == chunks.len() && switch_same == train.len();
    outcome(
        pass,
        format!(
            "lambda1=lambda2=0 DFT vs SFT over {} steps: losses {}, parameters {}; cloned student L_Align=L_VSD=0 \
             on {cloned_ok}/{} batches, z^Switch == z^T bitwise on {switch_same}/{} samples",
            sft.log.len(),
            if losses_identical { "bit-identical" } else { "DIFFER" },
            if params_identical { "bit-identical" } else { "DIFFER" },
            chunks.len(),
            train.len()
        ),
    )
}

/// A scratch directory for the binary-driven criteria.
fn scratch(name: &str) -> (PathBuf, Option<tempfile::TempDir>) {
    match std::env::var_os("SWITCHKD_ACCEPTANCE_DIR") {
        Some(root) => {
            let dir = PathBuf::from(root).join(name);
            let _ = fs::remove_dir_all(&dir);
            fs::create_dir_all(&dir).unwrap();
            (dir, None)
        }
        None => {
            let t = tempfile::tempdir().unwrap();
            (t.path().to_path_buf(), Some(t))
        }
    }
}

fn run_bin(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN).current_dir(dir).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("`switchkd {}` exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn c8_directional_gain() -> Outcome {
    let start = Instant::now();
    let (dir, _guard) = scratch("experiment");
    let result = (|| -> Result<String, String> {
        run_bin(&dir, &["--out", "out", "gen-data"])?;
        run_bin(&dir, &["--out", "out", "train-teacher"])?;
        let metrics: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("out/teacher/metrics.json")).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        let teacher_acc = metrics["accuracy"].as_f64().unwrap_or(0.0);
        let arms: [(&str, &[&str]); 3] = [
            ("PT-SFT", &["--scheme", "pt-sft"]),
            ("PT-DFT w/ switch", &["--scheme", "pt-dft", "--strategy", "dbild-rkl", "--switch"]),
            ("PT-DFT w/o switch", &["--scheme", "pt-dft", "--strategy", "dbild-rkl", "--no-switch"]),
        ];
        let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for seed in EXPERIMENT_SEEDS {
            for (name, flags) in arms {
                let seed_s = seed.to_string();
                let mut args = vec!["--out", "out", "--seed", seed_s.as_str(), "distill"];
                args.extend_from_slice(flags);
                run_bin(&dir, &args)?;
                let scheme = if name == "PT-SFT" { "pt-sft" } else { "pt-dft" };
                let switch = if name.ends_with("w/o switch") { "noswitch" } else { "switch" };
                let run = format!("out/runs/{scheme}_dbild-rkl_{switch}_s{seed}/summary.csv");
                let rows = read_rows(&dir.join(run)).map_err(|e| e.to_string())?;
                acc.entry(name).or_default().push(rows[0].val_accuracy);
            }
        }
        let (sft, sw, nosw) = (&acc["PT-SFT"], &acc["PT-DFT w/ switch"], &acc["PT-DFT w/o switch"]);
        let gain_kd = mean(sw) - mean(sft);
        let margin_kd = sd(sw).max(sd(sft));
        let gain_sw = mean(sw) - mean(nosw);
        let margin_sw = sd(sw).max(sd(nosw));
        let secs = start.elapsed().as_secs_f64();
        let fmt = |v: &[f64]| format!("{:.4} ± {:.4} {:?}", mean(v), sd(v), v.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>());
        let pass = teacher_acc >= TEACHER_MIN_ACCURACY
            && gain_kd > margin_kd
            && gain_sw > margin_sw
            && secs < EXPERIMENT_BUDGET_S;
        let detail = format!(
            "teacher {teacher_acc:.4} (>= {TEACHER_MIN_ACCURACY}); PT-SFT {}; w/ switch {}; w/o switch {}; \
             DFT-SFT gain {gain_kd:+.4} vs sd {margin_kd:.4} [{}]; switch gain {gain_sw:+.4} vs sd {margin_sw:.4} [{}]; \
             {secs:.0} s (< {EXPERIMENT_BUDGET_S:.0} s)",
            fmt(sft),
            fmt(sw),
            fmt(nosw),
            if gain_kd > margin_kd { "ok" } else { "not met" },
            if gain_sw > margin_sw { "ok" } else { "not met" },
        );
        Ok(format!("{}{detail}", if pass { "" } else { "\u{0}" }))
    })();
    match result {
        Ok(text) => match text.strip_prefix('\u{0}') {
            Some(detail) => outcome(false, detail.to_string()),
            None => outcome(true, text),
        },
        Err(e) => outcome(false, e),
    }
}

/// Small regime for criteria 9 and 10: the point is plumbing, not accuracy.
fn small_config() -> serde_json::Value {
    json!({
        "dataset": { "n_train": 96, "n_val": 48, "seed": 5, "noise_level": 0.2 },
        "teacher_dataset": { "n_train": 192, "n_val": 48, "seed": 6 },
        "teacher_training": {
            "pt": { "batch_size": 32, "epochs": 1 },
            "sft": { "batch_size": 32, "epochs": 2 }
        },
        "distill": { "ft": { "learning_rate": 0.001, "batch_size": 16, "epochs": 1 } },
        "out": "out",
        "seeds": [0, 1, 2]
    })
}

fn write_config(dir: &Path, name: &str, cfg: &serde_json::Value) {
    fs::write(dir.join(name), serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}

fn c9_scheme_ablation() -> Outcome {
    let (dir, _guard) = scratch("ablation");
    let result = (|| -> Result<String, String> {
        let mut strategies = small_config();
        strategies["ablate"] = json!({ "schemes": ["pt-dft"] });
        let mut schemes = small_config();
        schemes["ablate"] = json!({ "strategies": ["dbild-rkl"], "schemes": ["pt-sft", "dpt-sft", "pt-dft", "dpt-dft"] });
        schemes["out"] = json!("out-schemes");
        write_config(&dir, "strategies.json", &strategies);
        write_config(&dir, "schemes.json", &schemes);
        let mut notes = Vec::new();
        let mut ok = true;
        for (cfg, out, runs, means) in [("strategies.json", "out", 18, 6), ("schemes.json", "out-schemes", 12, 4)] {
            run_bin(&dir, &["--config", cfg, "gen-data"])?;
            run_bin(&dir, &["--config", cfg, "train-teacher"])?;
            let table = run_bin(&dir, &["--config", cfg, "ablate"])?;
            let csv = dir.join(out).join("ablation.csv");
            let header = fs::read_to_string(&csv).map_err(|e| e.to_string())?.lines().next().unwrap_or("").to_string();
            let rows = read_rows(&csv).map_err(|e| e.to_string())?;
            let n_run = rows.iter().filter(|r| r.kind == RowKind::Run).count();
            let n_mean = rows.iter().filter(|r| r.kind == RowKind::Mean).count();
            let finite = rows.iter().all(|r| r.total.is_finite() && r.steps > 0);
            let table_lines = table.lines().count().saturating_sub(2);
            let good = header == COLUMNS.join(",") && n_run == runs && n_mean == means && finite && table_lines == means;
            ok &= good;
            notes.push(format!("{cfg}: {n_run}+{n_mean} rows (want {runs}+{means}), table {table_lines} lines"));
        }
        let schemes_seen = read_rows(&dir.join("out-schemes/ablation.csv"))
            .map_err(|e| e.to_string())?
            .iter()
            .filter(|r| r.kind == RowKind::Mean)
            .map(|r| r.scheme.label())
            .collect::<Vec<_>>()
            .join("/");
        notes.push(format!("schemes {schemes_seen}"));
        Ok(format!("{}{}", if ok { "" } else { "\u{0}" }, notes.join("; ")))
    })();
    match result {
        Ok(text) => match text.strip_prefix('\u{0}') {
            Some(d) => outcome(false, d.to_string()),
            None => outcome(true, text),
        },
        Err(e) => outcome(false, e),
    }
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn c10_reproducibility() -> Outcome {
    let (root, _guard) = scratch("reproducibility");
    let mut cfg = small_config();
    cfg["ablate"] = json!({ "strategies": ["rkl", "dbild-rkl"], "switch": [true, false], "schemes": ["dpt-dft"] });
    cfg["seeds"] = json!([0, 1]);
    let commands: [&[&str]; 6] = [
        &["gen-data"],
        &["train-teacher"],
        &["distill", "--seed", "4"],
        &["ablate"],
        &["eval", "--checkpoint", "out/runs/pt-dft_dbild-rkl_switch_s4"],
        &["verify"],
    ];
    let result = (|| -> Result<(usize, Vec<String>), String> {
        let mut stdouts = Vec::new();
        let mut trees = Vec::new();
        for copy in ["a", "b"] {
            let dir = root.join(copy);
            fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
            write_config(&dir, "config.json", &cfg);
            let mut outs = Vec::new();
            for c in commands {
                let mut args = vec!["--config", "config.json"];
                args.extend_from_slice(c);
                outs.push(run_bin(&dir, &args)?);
            }
            stdouts.push(outs);
            trees.push(tree(&dir.join("out")));
        }
        let mut diffs = Vec::new();
        if trees[0].keys().ne(trees[1].keys()) {
            diffs.push("file sets differ".to_string());
        }
        for (path, bytes) in &trees[0] {
            if trees[1].get(path) != Some(bytes) {
                diffs.push(path.display().to_string());
            }
        }
        for (i, c) in commands.iter().enumerate() {
            if stdouts[0][i] != stdouts[1][i] {
                diffs.push(format!("stdout of {}", c[0]));
            }
        }
        Ok((trees[0].len(), diffs))
    })();
    match result {
        Ok((files, diffs)) => outcome(
            diffs.is_empty(),
            format!(
                "two invocations of gen-data, train-teacher, distill, ablate, eval, verify: {files} files compared byte-for-byte, {} differences{}",
                diffs.len(),
                if diffs.is_empty() { String::new() } else { format!(" ({})", diffs.join(", ")) }
            ),
        ),
        Err(e) => outcome(false, e),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("knee-oracle", c1_knee_oracle),
        ("knee-affine-invariance", c2_knee_affine),
        ("dbild-oracle", c3_dbild_oracle),
        ("dbild-invariants", c4_dbild_invariants),
        ("gradient-correctness", c5_gradients),
        ("frozen-teacher-and-confinement", c6_frozen_teacher_and_confinement),
        ("collapse-identities", c7_collapse),
        ("directional-gain", c8_directional_gain),
        ("scheme-ablation", c9_scheme_ablation),
        ("reproducibility", c10_reproducibility),
    ];
    let only: Option<Vec<usize>> = std::env::var("SWITCHKD_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&number)) {
            continue;
        }
        let start = Instant::now();
        let r = check();
        ran += 1;
        if !r.pass {
            failed += 1;
        }
        println!(
            "{} [{number:>2}] {name}: {} ({:.1} s)",
            if r.pass { "PASS" } else { "FAIL" },
            r.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 && std::env::var_os("SWITCHKD_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
