//! Self-check suite behind `switchkd verify`.
//!
//! Each check draws seeded cases, compares the library against an independent
//! reference (a brute-force oracle, central finite differences, or an algebraic
//! identity) and records the number of failing cases together with the largest
//! error it observed. Failures are reported, never raised.
//!
//! The oracles in this module are written straight from the definitions with plain
//! loops and share no code with the tape, the knee detector or the loss module.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{compare_gradients, finite_diff_gradient, Segment, Tape, Var};
use crate::data::Sample;
use crate::engine::{
    ce_loss_on_tape, record_objective, total_loss, train_stage, DistillConfig, PreparedBatch, StageName, StageSpec,
};
use crate::error::Result;
use crate::knee::{knee_index, DEFAULT_K_CAP};
use crate::loss::{
    branch_trace, dbild_loss, Divergence, Leader, LossStrategy, Selection, StrategyKind, DEFAULT_TAU,
};
use crate::model::{
    switch_forward_on_tape, Group, Image, ImageSize, ModelConfig, ToyVLM, Trainable,
};

/// Relative tolerance of every finite-difference comparison.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Absolute floor below which gradient mismatches are ignored.
pub const GRAD_ABS_TOL: f64 = 1e-6;
/// Step of the central differences.
pub const FD_EPS: f64 = 1e-5;
/// Agreement required between `dbild_loss` and the straight-line oracle.
pub const ORACLE_TOL: f64 = 1e-10;
/// Losses may dip this far below zero through rounding.
pub const NONNEG_TOL: f64 = 1e-12;

/// Case counts of one run of the suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct VerifySizes {
    pub knee_vectors: usize,
    pub dbild_pairs: usize,
    pub grad_instances: usize,
    pub op_cases: usize,
    pub frozen_steps: usize,
}

impl Default for VerifySizes {
    fn default() -> Self {
        Self {
            knee_vectors: 1000,
            dbild_pairs: 200,
            grad_instances: 50,
            op_cases: 100,
            frozen_steps: 20,
        }
    }
}

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest error observed; its meaning depends on the check (absolute error,
    /// rank mismatch, or gradient norm).
    pub max_error: f64,
    pub tolerance: f64,
    /// Description of the first failing case, if any.
    pub first_failure: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

/// Accumulates cases of one check.
struct Tally {
    result: CheckResult,
}

impl Tally {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            result: CheckResult {
                name: name.to_string(),
                cases: 0,
                failures: 0,
                max_error: 0.0,
                tolerance,
                first_failure: None,
            },
        }
    }

    fn record(&mut self, error: f64, ok: bool, describe: impl FnOnce() -> String) {
        let r = &mut self.result;
        r.cases += 1;
        if error.is_nan() {
            r.max_error = f64::NAN;
        } else if !r.max_error.is_nan() {
            r.max_error = r.max_error.max(error);
        }
        if !ok {
            r.failures += 1;
            if r.first_failure.is_none() {
                r.first_failure = Some(describe());
            }
        }
    }

    /// A case that could not be evaluated at all.
    fn error(&mut self, e: impl fmt::Display) {
        self.record(f64::NAN, false, || format!("error: {e}"));
    }

    fn finish(self) -> CheckResult {
        self.result
    }
}

/// All checks of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed())
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        writeln!(
            f,
            "{:<width$}  {:>6}  {:>8}  {:>10}  {:>9}  status",
            "check", "cases", "failures", "max error", "tolerance"
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<width$}  {:>6}  {:>8}  {:>10.3e}  {:>9.1e}  {}",
                c.name,
                c.cases,
                c.failures,
                c.max_error,
                c.tolerance,
                if c.passed() { "PASS" } else { "FAIL" }
            )?;
            if let Some(why) = &c.first_failure {
                writeln!(f, "{:<width$}  first failure: {why}", "")?;
            }
        }
        let failed = self.failed().count();
        write!(
            f,
            "{} of {} checks passed (seed {})",
            self.checks.len() - failed,
            self.checks.len(),
            self.seed
        )
    }
}

/// Runs every check with the default sizes.
pub fn run_all(seed: u64) -> VerifyReport {
    run_with(seed, VerifySizes::default())
}

/// Runs every check with explicit case counts.
pub fn run_with(seed: u64, sizes: VerifySizes) -> VerifyReport {
    let s = |salt: u64| seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let checks = vec![
        check_knee_oracle(s(1), sizes.knee_vectors),
        check_knee_affine(s(2), sizes.knee_vectors),
        check_dbild_oracle(s(3), sizes.dbild_pairs),
        check_dbild_zero_at_equality(s(4), sizes.dbild_pairs),
        check_dbild_shift_exact(s(5), sizes.dbild_pairs),
        check_dbild_shift_float(s(6), sizes.dbild_pairs),
        check_dbild_nonnegative(s(7), sizes.dbild_pairs),
        check_pair_counts(s(8), sizes.dbild_pairs),
        check_autodiff_ops(s(9), sizes.op_cases),
        check_grad_dbild(s(10), sizes.grad_instances),
        check_grad_ce(s(11), sizes.grad_instances),
        check_grad_total(s(12), sizes.grad_instances),
        check_lambda_zero_collapse(s(13), 10),
        check_cloned_student_collapse(s(14), 10),
        check_switch_confinement(s(15), 10),
        check_frozen_teacher(s(16), sizes.frozen_steps),
    ];
    VerifyReport { seed, checks }
}

mod oracle {
    /// Descending order, ties by smaller index.
    pub fn order(z: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..z.len()).collect();
        idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
        idx
    }

    /// Brute force over every rank of the normalized curve.
    pub fn knee(z: &[f64], k_cap: usize) -> usize {
        let n = z.len();
        let s: Vec<f64> = order(z).into_iter().map(|i| z[i]).collect();
        let (hi, lo) = (s[0], s[n - 1]);
        if hi == lo {
            return 2;
        }
        let d: Vec<f64> = (1..=n)
            .map(|rank| {
                let x = rank as f64 / n as f64;
                let y = (s[rank - 1] - lo) / (hi - lo);
                (1.0 - x) - y
            })
            .collect();
        let top = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut best_rank = n;
        for rank in (1..=n).rev() {
            if d[rank - 1] >= top - 1e-12 {
                best_rank = rank;
            }
        }
        best_rank.max(2).min(n).min(k_cap)
    }

    fn softmax(v: &[f64], tau: f64) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| ((x - m) / tau).exp()).collect();
        let total: f64 = e.iter().sum();
        e.into_iter().map(|x| x / total).collect()
    }

    fn differences(v: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        for m in 0..v.len() {
            for n in m + 1..v.len() {
                out.push(v[m] - v[n]);
            }
        }
        out
    }

    /// One branch: the leader picks k indices, both sides are compared there.
    pub fn branch(z_t: &[f64], z_s: &[f64], teacher_leads: bool, tau: f64, k_cap: usize) -> f64 {
        let leader = if teacher_leads { z_t } else { z_s };
        let k = knee(leader, k_cap);
        let top: Vec<usize> = order(leader).into_iter().take(k).collect();
        let t: Vec<f64> = top.iter().map(|&i| z_t[i]).collect();
        let s: Vec<f64> = top.iter().map(|&i| z_s[i]).collect();
        let p = softmax(&differences(&t), tau);
        let q = softmax(&differences(&s), tau);
        let floor = 1e-12f64;
        p.iter()
            .zip(&q)
            .map(|(&pi, &qi)| qi * (qi.max(floor).ln() - pi.max(floor).ln()))
            .sum()
    }

    pub fn dbild(z_t: &[f64], z_s: &[f64], tau: f64, k_cap: usize) -> f64 {
        branch(z_t, z_s, true, tau, k_cap) + branch(z_t, z_s, false, tau, k_cap)
    }
}

/// Logits drawn from one of several shapes: flat noise, a few dominant entries, a
/// heavy-tailed decay, or a coarse grid with many ties.
pub fn random_logits(rng: &mut ChaCha8Rng, n: usize, allow_ties: bool) -> Vec<f64> {
    let kinds = if allow_ties { 4 } else { 3 };
    let mut z: Vec<f64> = match rng.gen_range(0..kinds) {
        0 => (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        1 => {
            let head = rng.gen_range(1..=n.min(12));
            (0..n)
                .map(|i| {
                    if i < head {
                        rng.gen_range(4.0..10.0)
                    } else {
                        rng.gen_range(-2.0..1.0)
                    }
                })
                .collect()
        }
        2 => (0..n).map(|_| -2.0 * (1.0 - rng.gen::<f64>()).ln()).collect(),
        _ => (0..n).map(|_| rng.gen_range(-8i32..=8) as f64 * 0.5).collect(),
    };
    z.shuffle(rng);
    z
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `knee_index` against the brute-force oracle on vectors of length 4..=512.
pub fn check_knee_oracle(seed: u64, cases: usize) -> CheckResult {
    let mut rng = rng_for(seed);
    let mut tally = Tally::new("knee-oracle", 0.0);
    for _ in 0..cases {
        let n = rng.gen_range(4..=512);
        let z = random_logits(&mut rng, n, true);
        let k_cap = if rng.gen_bool(0.2) { rng.gen_range(2..=16) } else { DEFAULT_K_CAP };
        match knee_index(&z, k_cap) {
            Ok(r) => {
                let want = oracle::knee(&z, k_cap);
                let ok = r.k == want && r.sorted_indices == oracle::order(&z);
                tally.record(r.k.abs_diff(want) as f64, ok, || format!("N={n}, k={} vs oracle {want}", r.k));
            }
            Err(e) => tally.error(e),
        }
    }
    tally.finish()
}

/// `knee_index(a·z + b) = knee_index(z)` for `a > 0`.
pub fn check_knee_affine(seed: u64, cases: usize) -> CheckResult {
    let mut rng = rng_for(seed);
    let mut tally = Tally::new("knee-affine-invariance", 0.0);
    for _ in 0..cases {
        let n = rng.gen_range(4..=512);
        let z = random_logits(&mut rng, n, true);
        let a = 10f64.powf(rng.gen_range(-1.0..1.0));
        let b = rng.gen_range(-50.0..50.0);
        let mapped: Vec<f64> = z.iter().map(|v| a * v + b).collect();
        match (knee_index(&z, DEFAULT_K_CAP), knee_index(&mapped, DEFAULT_K_CAP)) {
            (Ok(x), Ok(y)) => {
                tally.record(x.k.abs_diff(y.k) as f64, x.k == y.k, || {
                    format!("N={n}, a={a}, b={b}: k {} vs {}", x.k, y.k)
                });
            }
            (Err(e), _) | (_, Err(e)) => tally.error(e),
        }
    }
    tally.finish()
}

fn pair_sizes(rng: &mut ChaCha8Rng) -> usize {
    [8, 32, 128][rng.gen_range(0..3)]
}

/// `dbild_loss` against the straight-line oracle.
pub fn check_dbild_oracle(seed: u64, cases: usize) -> CheckResult {
    let mut rng = rng_for(seed);
    let mut tally = Tally::new("dbild-oracle", ORACLE_TOL);
    for _ in 0..cases {
        let n = pair_sizes(&mut rng);
        let z_t = random_logits(&mut rng, n, true);
        let z_s = random_logits(&mut rng, n, true);
        let tau = if rng.gen_bool(0.5) { DEFAULT_TAU } else { rng.gen_range(0.5..5.0) };
        match dbild_loss(&z_t, &z_s, tau, DEFAULT_K_CAP) {
            Ok(got) => {
                let want = oracle::dbild(&z_t, &z_s, tau, DEFAULT_K_CAP);
                let err = (got - want).abs();
                tally.record(err, err <= ORACLE_TOL, || format!("N={n}, tau={tau}: {got} vs {want}"));
            }
            Err(e) => tally.error(e),
        }
    }
    tally.finish()
}

/// `|L(z, z)|` is numerically zero.
pub fn check_dbild_zero_at_equality(seed: u64, cases: usize) -> CheckResult {
    let mut rng = rng_for(seed);
    let mut tally = Tally::new("dbild-zero-at-equality", ORACLE_TOL);
    for _ in 0..cases {
        let n = pair_sizes(&mut rng);
        let z = random_logits(&mut rng, n, true);
        match dbild_loss(&z, &z, DEFAULT_TAU, DEFAULT_K_CAP) {
            Ok(v) => tally.record(v.abs(), v.abs() < ORACLE_TOL, || format!("N={n}: {v}")),
            Err(e) => tally.error(e),
        }
    }
    tally.finish()
}

/// Shifts on a dyadic grid are exact in floating point, so the loss must not move
/// by a single bit when either argument is shifted.
pub fn check_dbild_shift_exact(seed: u64, cases: usize) -> CheckResult {
    let mut rng = rng_for(seed);
    let mut tally = Tally::new("dbild-shift-exact", 0.0);
    let grid = |rng: &mut ChaCha8Rng, span: i64| rng.gen_range(-span..=span) as f64 / 1024.0;
    for _ in 0..cases {
        let n = pair_sizes(&mut rng);
        let z_t: Vec<f64> = (0..n).map(|_| grid(&mut rng, 8192)).collect();
        let z_s: Vec<f64> = (0..n).map(|_| grid(&mut rng, 8192)).collect();
        let (ct, cs) = (grid(&mut rng, 4096), grid(&mut rng, 4096));
        let t2: Vec<f64> = z_t.iter().map(|v| v + ct).collect();
        let s2: Vec<f64> = z_s.iter().map(|v| v + cs).collect();
        let base = dbild_loss(&z_t, &z_s, DEFAULT_TAU, DEFAULT_K_CAP);
        let by_t = dbild_loss(&t2, &z_s, DEFAULT_TAU, DEFAULT_K_CAP);
        let by_s = dbild_loss(&z_t, &s2, DEFAULT_TAU, DEFAULT_K_CAP);
        match (base, by_t, by_s) {
            (Ok(a), Ok(b), Ok(c)) => {
                let err = (a - b).abs().max((a - c).abs());
                tally.record(err, a == b && a == c, || format!("N={n}: {a} / {b} / {c}"));
            }
            (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => tally.error(e),
        }
    }
    tally.finish()
}

/// Shift invariance for arbitrary real shifts, up to rounding.
pub fn check_dbild_shift_float(seed: u64, cases: usize) -> CheckResult {
    let mut rng = rng_for(seed);
    let tol = 1e-12;
    let mut tally = Tally::new("dbild-shift-float", tol);
    for _ in 0..cases {
        let n = pair_sizes(&mut rng);
        let z_t = random_logits(&mut rng, n, false);
        let z_s = random_logits(&mut rng, n, false);
        let c: f64 = rng.gen_range(-5.0..5.0);
        let shifted_t: Vec<f64> = z_t.iter().map(|v| v + c).collect();
        let shifted_s: Vec<f64> = z_s.iter().map(|v| v - c).collect();
        let run = |t: &[f64], s: &[f64]| dbild_loss(t, s, DEFAULT_TAU, DEFAULT_K_CAP);
        match (run(&z_t, &z_s), run(&shifted_t, &z_s), run(&z_t, &shifted_s)) {
            (Ok(a), Ok(b), Ok(d)) => {
                let err = (a - b).abs().max((a - d).abs());
                tally.record(err, err <= tol, || format!("N={n}, c={c}: {a} / {b} / {d}"));
            }
            (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => tally.error(e),
        }
    }
    tally.finish()
}

/// Both branches and their sum stay above `-NONNEG_TOL`.
pub fn check_dbild_nonnegative(seed: u64, cases: usize) -> CheckResult {
    let mut rng = rng_for(seed);
    let mut tally = Tally::new("dbild-nonnegative", NONNEG_TOL);
    for _ in 0..cases {
        let n = pair_sizes(&mut rng);
        let z_t = random_logits(&mut rng, n, true);
        let z_s = random_logits(&mut rng, n, true);
        let sel = Selection::Knee { k_cap: DEFAULT_K_CAP };
        let branches = [Leader::Teacher, Leader::Student]
            .map(|l| branch_trace(l, &z_t, &z_s, sel, DEFAULT_TAU, Divergence::Reverse).map(|t| t.value));
        match branches {
            [Ok(lt), Ok(ls)] => {
                let lowest = lt.min(ls).min(lt + ls);
                let deficit = (-lowest).max(0.0);
                tally.record(deficit, lowest >= -NONNEG_TOL, || format!("N={n}: L_t={lt}, L_s={ls}"));
            }
            [Err(e), _] | [_, Err(e)] => tally.error(e),
        }
    }
    tally.finish()
}

/// Every branch produces exactly `k(k-1)/2` differences on both sides.
pub fn check_pair_counts(seed: u64, cases: usize) -> CheckResult {
    let mut rng = rng_for(seed);
    let mut tally = Tally::new("dbild-pair-count", 0.0);
    for _ in 0..cases {
        let n = pair_sizes(&mut rng);
        let z_t = random_logits(&mut rng, n, true);
        let z_s = random_logits(&mut rng, n, true);
        let k_cap = rng.gen_range(2..=DEFAULT_K_CAP);
        for leader in [Leader::Teacher, Leader::Student] {
            let sel = Selection::Knee { k_cap };
            match branch_trace(leader, &z_t, &z_s, sel, DEFAULT_TAU, Divergence::Reverse) {
                Ok(t) => {
                    let want = t.k * (t.k - 1) / 2;
                    let lens = [
                        t.teacher.differences.len(),
                        t.student.differences.len(),
                        t.teacher.probabilities.len(),
                        t.student.probabilities.len(),
                    ];
                    let worst = lens.iter().map(|l| l.abs_diff(want)).max().unwrap_or(0);
                    tally.record(worst as f64, worst == 0 && t.k <= k_cap, || {
                        format!("N={n}, k={}: lengths {lens:?}, expected {want}", t.k)
                    });
                }
                Err(e) => tally.error(e),
            }
        }
    }
    tally.finish()
}

/// Where an op's inputs are sampled.
#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
    /// Bounded away from the clamp floor at 0.
    AwayFromZero,
}

type OpBuilder = fn(&mut Tape, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    domain: Domain,
    build: OpBuilder,
}

fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, shapes: &[&[usize]], domain: Domain, build: OpBuilder) -> OpCase {
        OpCase {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            domain,
            build,
        }
    }
    use Domain::*;
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], Any, |t, v| t.matmul(v[0], v[1])),
        case("add", &[&[2, 3], &[2, 3]], Any, |t, v| t.add(v[0], v[1])),
        case("sub", &[&[2, 3], &[2, 3]], Any, |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[2, 3], &[2, 3]], Any, |t, v| t.mul(v[0], v[1])),
        case("add_row_bias", &[&[3, 4], &[4]], Any, |t, v| t.add_row_bias(v[0], v[1])),
        case("scale", &[&[5]], Any, |t, v| t.scale(v[0], -1.7)),
        case("gelu", &[&[6]], Any, |t, v| t.gelu(v[0])),
        case("log", &[&[6]], Positive, |t, v| t.log(v[0])),
        case("exp", &[&[6]], Any, |t, v| t.exp(v[0])),
        case("clamp_min", &[&[6]], AwayFromZero, |t, v| t.clamp_min(v[0], 0.0)),
        case("sum", &[&[2, 3]], Any, |t, v| t.sum(v[0])),
        case("mean", &[&[2, 3]], Any, |t, v| t.mean(v[0])),
        case("reshape", &[&[2, 3]], Any, |t, v| t.reshape(v[0], vec![3, 2])),
        case("softmax", &[&[3, 5]], Any, |t, v| t.softmax(v[0], 1.3)),
        case("log_softmax", &[&[3, 5]], Any, |t, v| t.log_softmax(v[0], 0.7)),
        case("gather", &[&[7]], Any, |t, v| t.gather(v[0], &[3, 0, 3, 6])),
        case("gather_rows", &[&[3, 2]], Any, |t, v| t.gather_rows(v[0], &[2, 0, 2])),
        case("concat_rows", &[&[1, 3], &[2, 3]], Any, |t, v| t.concat_rows(&[v[0], v[1]])),
        case("concat", &[&[2], &[2, 2]], Any, |t, v| t.concat(&[v[0], v[1]])),
        case("pairwise_differences", &[&[5]], Any, |t, v| t.pairwise_differences(v[0])),
        case("layer_norm", &[&[3, 4], &[4], &[4]], Any, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        case("causal_attention", &[&[5, 4], &[5, 4], &[5, 4]], Any, |t, v| {
            let segments = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }];
            t.causal_attention(v[0], v[1], v[2], &segments, 2)
        }),
    ]
}

fn sample_domain(rng: &mut ChaCha8Rng, domain: Domain) -> f64 {
    match domain {
        Domain::Any => rng.gen_range(-2.0..2.0),
        Domain::Positive => rng.gen_range(0.2..3.0),
        Domain::AwayFromZero => {
            let m = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        }
    }
}

/// `Σ w ⊙ op(inputs)` on a fresh tape, with inputs tracked or not.
fn op_probe(case: &OpCase, flat: &[f64], weights: &[f64], track: bool) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let mut vars = Vec::new();
    let mut offset = 0;
    for shape in &case.shapes {
        let n: usize = shape.iter().product();
        let values = flat[offset..offset + n].to_vec();
        offset += n;
        vars.push(if track {
            tape.variable(shape.clone(), values)?
        } else {
            tape.constant(shape.clone(), values)?
        });
    }
    let out = (case.build)(&mut tape, &vars)?;
    let w = tape.constant(tape.shape(out).to_vec(), weights.to_vec())?;
    let prod = tape.mul(out, w)?;
    let root = tape.sum(prod)?;
    let value = tape.scalar(root);
    let mut grad = Vec::new();
    if track {
        tape.backward(root)?;
        for (v, shape) in vars.iter().zip(&case.shapes) {
            match tape.grad(*v) {
                Some(g) => grad.extend_from_slice(g),
                None => grad.extend(std::iter::repeat(0.0).take(shape.iter().product())),
            }
        }
    }
    Ok((value, grad))
}

/// Backward pass of every tape op against central differences.
pub fn check_autodiff_ops(seed: u64, cases_per_op: usize) -> CheckResult {
    let mut rng = rng_for(seed);
    let mut tally = Tally::new("grad-autodiff-ops", GRAD_REL_TOL);
    for case in op_cases() {
        let n_in: usize = case.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        for _ in 0..cases_per_op {
            let x: Vec<f64> = (0..n_in).map(|_| sample_domain(&mut rng, case.domain)).collect();
            let outcome = (|| -> Result<_> {
                let mut probe_tape = Tape::new();
                let dims = {
                    let mut vars = Vec::new();
                    let mut offset = 0;
                    for shape in &case.shapes {
                        let n: usize = shape.iter().product();
                        vars.push(probe_tape.constant(shape.clone(), x[offset..offset + n].to_vec())?);
                        offset += n;
                    }
                    let out = (case.build)(&mut probe_tape, &vars)?;
                    probe_tape.array(out).numel()
                };
                let weights: Vec<f64> = (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let (_, analytic) = op_probe(&case, &x, &weights, true)?;
                let numeric = finite_diff_gradient(|p| Ok(op_probe(&case, p, &weights, false)?.0), &x, FD_EPS)?;
                Ok(compare_gradients(&analytic, &numeric, GRAD_REL_TOL, GRAD_ABS_TOL))
            })();
            match outcome {
                Ok(c) => tally.record(c.max_abs_error, c.passed, || {
                    format!("{}: abs {:.3e}, rel {:.3e}", case.name, c.max_abs_error, c.max_rel_error)
                }),
                Err(e) => tally.error(format!("{}: {e}", case.name)),
            }
        }
    }
    tally.finish()
}

/// Indices the student side selects in the student-led branch.
fn student_selection(z_s: &[f64]) -> Result<Vec<usize>> {
    let r = knee_index(z_s, DEFAULT_K_CAP)?;
    Ok(r.sorted_indices[..r.k].to_vec())
}

/// Gradient of `dbild_loss` with respect to the student logits.
///
/// Top-k selection makes the loss piecewise smooth. Instances whose student-led
/// selection changes inside the finite-difference stencil sit on a seam, where no
/// gradient exists; they are redrawn rather than counted.
pub fn check_grad_dbild(seed: u64, cases: usize) -> CheckResult {
    let mut rng = rng_for(seed);
    let mut tally = Tally::new("grad-dbild", GRAD_REL_TOL);
    let mut redrawn = 0;
    while tally.result.cases < cases && redrawn < 10 * cases {
        let n = [8, 16, 32][rng.gen_range(0..3)];
        let z_t = random_logits(&mut rng, n, false);
        let z_s = random_logits(&mut rng, n, false);
        let outcome = (|| -> Result<Option<_>> {
            let mut tape = Tape::new();
            let t = tape.constant(vec![n], z_t.clone())?;
            let s = tape.variable(vec![n], z_s.clone())?;
            let cfg = crate::loss::LossConfig::default();
            let l = crate::loss::row_loss_on_tape(&mut tape, &cfg, t, s)?;
            tape.backward(l)?;
            let analytic = tape.grad(s).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
            let base = student_selection(&z_s)?;
            let mut stable = true;
            let numeric = finite_diff_gradient(
                |p| {
                    stable &= student_selection(p)? == base;
                    dbild_loss(&z_t, p, DEFAULT_TAU, DEFAULT_K_CAP)
                },
                &z_s,
                FD_EPS,
            )?;
            Ok(stable.then(|| compare_gradients(&analytic, &numeric, GRAD_REL_TOL, GRAD_ABS_TOL)))
        })();
        match outcome {
            Ok(Some(c)) => tally.record(c.max_abs_error, c.passed, || {
                format!("N={n}: abs {:.3e}, rel {:.3e}", c.max_abs_error, c.max_rel_error)
            }),
            Ok(None) => redrawn += 1,
            Err(e) => tally.error(e),
        }
    }
    let mut r = tally.finish();
    if r.cases < cases {
        r.failures += 1;
        r.first_failure.get_or_insert_with(|| format!("only {} stable instances", r.cases));
    }
    r
}

/// Tiny architectures that keep whole-model finite differences cheap.
pub fn tiny_configs() -> (ModelConfig, ModelConfig) {
    let student = ModelConfig {
        image_size: ImageSize {
            height: 4,
            width: 4,
            channels: 1,
        },
        vision_dim: 4,
        n_visual_tokens: 4,
        lm_dim: 8,
        lm_layers: 1,
        lm_heads: 2,
        vocab_size: 16,
        max_seq_len: 8,
    };
    let teacher = ModelConfig {
        lm_dim: 12,
        lm_layers: 2,
        lm_heads: 2,
        ..student
    };
    (teacher, student)
}

/// Random samples for a tiny config: 3-token prompts and 1–2 token answers.
pub fn tiny_samples(cfg: &ModelConfig, rng: &mut ChaCha8Rng, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let size = cfg.image_size;
            let image = Image::new(size, (0..size.numel()).map(|_| rng.gen::<f64>()).collect())
                .expect("length matches the size");
            let mut token = || rng.gen_range(1..cfg.vocab_size);
            let prompt = vec![0, token(), token()];
            let answer_len = 1 + (i % 2);
            let answer = (0..answer_len).map(|_| token()).collect();
            Sample {
                id: i as u64,
                image,
                prompt,
                answer,
            }
        })
        .collect()
}

/// Distinct coordinates to probe, a few from each parameter group.
fn probe_coordinates(model: &ToyVLM, rng: &mut ChaCha8Rng, per_group: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for g in Group::ALL {
        let range = model.group_range(g);
        let picked = rand::seq::index::sample(rng, range.len(), per_group.min(range.len()));
        out.extend(picked.into_iter().map(|i| range.start + i));
    }
    out
}

fn perturbed(model: &ToyVLM, base: &[f64], coords: &[usize], p: &[f64]) -> Result<ToyVLM> {
    let mut values = base.to_vec();
    for (&c, &v) in coords.iter().zip(p) {
        values[c] = v;
    }
    let mut m = model.clone();
    m.set_flat_values(&values)?;
    Ok(m)
}

/// Mean CE over answer positions, differentiated through every student parameter.
pub fn check_grad_ce(seed: u64, cases: usize) -> CheckResult {
    let mut rng = rng_for(seed);
    let mut tally = Tally::new("grad-ce", GRAD_REL_TOL);
    let (_, cfg) = tiny_configs();
    for i in 0..cases {
        let outcome = (|| -> Result<_> {
            let mut student = ToyVLM::new(cfg, rng.gen())?;
            let samples = tiny_samples(&cfg, &mut rng, 2);
            let batch = PreparedBatch::new(&cfg, &samples.iter().collect::<Vec<_>>())?;
            let mask: Vec<bool> = if i % 2 == 0 {
                batch.answer_mask.clone()
            } else {
                vec![true; batch.rows()]
            };
            let ce = |m: &ToyVLM, track: Trainable| -> Result<(f64, Tape, crate::model::BoundVlm, Var)> {
                let mut tape = Tape::new();
                let bound = m.bind(&mut tape, track);
                let z = m.forward_on_tape(&mut tape, &bound, &batch.inputs)?;
                let l = ce_loss_on_tape(&mut tape, z, &batch.targets, &mask, 1.0)?;
                Ok((tape.scalar(l), tape, bound, l))
            };
            let (_, mut tape, bound, l) = ce(&student, Trainable::ALL)?;
            tape.backward(l)?;
            student.accumulate_grads(&tape, &bound)?;
            let grads = student.flat_grads();
            let base = student.flat_values();
            let coords = probe_coordinates(&student, &mut rng, 4);
            let analytic: Vec<f64> = coords.iter().map(|&c| grads[c]).collect();
            let at: Vec<f64> = coords.iter().map(|&c| base[c]).collect();
            let numeric = finite_diff_gradient(
                |p| Ok(ce(&perturbed(&student, &base, &coords, p)?, Trainable::NONE)?.0),
                &at,
                FD_EPS,
            )?;
            Ok(compare_gradients(&analytic, &numeric, GRAD_REL_TOL, GRAD_ABS_TOL))
        })();
        match outcome {
            Ok(c) => tally.record(c.max_abs_error, c.passed, || {
                format!("instance {i}: abs {:.3e}, rel {:.3e}", c.max_abs_error, c.max_rel_error)
            }),
            Err(e) => tally.error(e),
        }
    }
    tally.finish()
}

/// Student-led selections of every distilled row of `z^S` and `z^Switch`.
fn objective_selections(student: &ToyVLM, teacher: &ToyVLM, batch: &PreparedBatch) -> Result<Vec<Vec<usize>>> {
    let mut tape = Tape::new();
    let sb = student.bind(&mut tape, Trainable::NONE);
    let tb = teacher.bind(&mut tape, Trainable::NONE);
    let zs = student.forward_on_tape(&mut tape, &sb, &batch.inputs)?;
    let zsw = switch_forward_on_tape(&mut tape, student, &sb.vision, teacher, &tb, &batch.inputs)?;
    let n = student.config.vocab_size;
    let mut out = Vec::new();
    for z in [zs, zsw] {
        let values = tape.value(z);
        for (r, _) in batch.answer_mask.iter().enumerate().filter(|(_, &m)| m) {
            out.push(student_selection(&values[r * n..(r + 1) * n])?);
        }
    }
    Ok(out)
}

/// DFT config used by the whole-objective checks.
fn dft_config() -> DistillConfig {
    DistillConfig {
        strategy: LossStrategy::new(StrategyKind::DbildRkl),
        ..DistillConfig::default()
    }
}

/// Full DFT objective (CE + Align + VSD) through every student parameter.
pub fn check_grad_total(seed: u64, cases: usize) -> CheckResult {
    let mut rng = rng_for(seed);
    let mut tally = Tally::new("grad-total-loss", GRAD_REL_TOL);
    let (tc, sc) = tiny_configs();
    let cfg = dft_config();
    let stage = StageSpec::new(StageName::Dft);
    let mut redrawn = 0;
    while tally.result.cases < cases && redrawn < 10 * cases {
        let outcome = (|| -> Result<Option<_>> {
            let teacher = ToyVLM::new(tc, rng.gen())?;
            let mut student = ToyVLM::new(sc, rng.gen())?;
            let samples = tiny_samples(&sc, &mut rng, 2);
            let batch = PreparedBatch::new(&sc, &samples.iter().collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let vars = record_objective(&mut tape, &student, Some(&teacher), &batch, &stage, &cfg)?;
            tape.backward(vars.total)?;
            student.accumulate_grads(&tape, &vars.student)?;
            let grads = student.flat_grads();
            let base = student.flat_values();
            let coords = probe_coordinates(&student, &mut rng, 4);
            let analytic: Vec<f64> = coords.iter().map(|&c| grads[c]).collect();
            let at: Vec<f64> = coords.iter().map(|&c| base[c]).collect();
            let reference = objective_selections(&student, &teacher, &batch)?;
            let mut stable = true;
            let numeric = finite_diff_gradient(
                |p| {
                    let m = perturbed(&student, &base, &coords, p)?;
                    stable &= objective_selections(&m, &teacher, &batch)? == reference;
                    Ok(total_loss(Some(&teacher), &m, &batch, &stage, &cfg)?.total)
                },
                &at,
                FD_EPS,
            )?;
            Ok(stable.then(|| compare_gradients(&analytic, &numeric, GRAD_REL_TOL, GRAD_ABS_TOL)))
        })();
        match outcome {
            Ok(Some(c)) => tally.record(c.max_abs_error, c.passed, || {
                format!("abs {:.3e}, rel {:.3e}", c.max_abs_error, c.max_rel_error)
            }),
            Ok(None) => redrawn += 1,
            Err(e) => tally.error(e),
        }
    }
    let mut r = tally.finish();
    if r.cases < cases {
        r.failures += 1;
        r.first_failure.get_or_insert_with(|| format!("only {} stable instances", r.cases));
    }
    r
}

/// Objective value and student gradient for one stage and config.
fn value_and_grad(
    student: &ToyVLM,
    teacher: Option<&ToyVLM>,
    batch: &PreparedBatch,
    stage: &StageSpec,
    cfg: &DistillConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut m = student.clone();
    m.zero_grad();
    let mut tape = Tape::new();
    let vars = record_objective(&mut tape, &m, teacher, batch, stage, cfg)?;
    tape.backward(vars.total)?;
    m.accumulate_grads(&tape, &vars.student)?;
    Ok((vars.breakdown.total, m.flat_grads()))
}

/// With `λ1 = λ2 = 0` a DFT step reproduces SFT bit for bit.
pub fn check_lambda_zero_collapse(seed: u64, cases: usize) -> CheckResult {
    let mut rng = rng_for(seed);
    let mut tally = Tally::new("collapse-lambda-zero", 0.0);
    let (tc, sc) = tiny_configs();
    let zeroed = DistillConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..dft_config()
    };
    for _ in 0..cases {
        let outcome = (|| -> Result<_> {
            let teacher = ToyVLM::new(tc, rng.gen())?;
            let student = ToyVLM::new(sc, rng.gen())?;
            let samples = tiny_samples(&sc, &mut rng, 3);
            let batch = PreparedBatch::new(&sc, &samples.iter().collect::<Vec<_>>())?;
            let sft = value_and_grad(&student, None, &batch, &StageSpec::new(StageName::Sft), &zeroed)?;
            let dft = value_and_grad(&student, Some(&teacher), &batch, &StageSpec::new(StageName::Dft), &zeroed)?;
            Ok((sft, dft))
        })();
        match outcome {
            Ok(((v1, g1), (v2, g2))) => {
                let err = g1.iter().zip(&g2).map(|(a, b)| (a - b).abs()).fold((v1 - v2).abs(), f64::max);
                let identical = v1.to_bits() == v2.to_bits() && g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits());
                tally.record(err, identical, || format!("loss {v1} vs {v2}, max grad diff {err:.3e}"));
            }
            Err(e) => tally.error(e),
        }
    }
    tally.finish()
}

/// A student cloned from the teacher has `L_Align = L_VSD = 0` and `z^Switch = z^T`.
pub fn check_cloned_student_collapse(seed: u64, cases: usize) -> CheckResult {
    let mut rng = rng_for(seed);
    let mut tally = Tally::new("collapse-cloned-student", 0.0);
    let (tc, _) = tiny_configs();
    for _ in 0..cases {
        let outcome = (|| -> Result<_> {
            let teacher = ToyVLM::new(tc, rng.gen())?;
            let student = teacher.clone();
            let samples = tiny_samples(&tc, &mut rng, 3);
            let batch = PreparedBatch::new(&tc, &samples.iter().collect::<Vec<_>>())?;
            let br = total_loss(Some(&teacher), &student, &batch, &StageSpec::new(StageName::Dft), &dft_config())?;
            let mut tape = Tape::new();
            let tb = teacher.bind(&mut tape, Trainable::NONE);
            let sb = student.bind(&mut tape, Trainable::NONE);
            let zt = teacher.forward_on_tape(&mut tape, &tb, &batch.inputs)?;
            let zsw = switch_forward_on_tape(&mut tape, &student, &sb.vision, &teacher, &tb, &batch.inputs)?;
            let switch_diff = tape
                .value(zt)
                .iter()
                .zip(tape.value(zsw))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let same_bits = tape.value(zt).iter().zip(tape.value(zsw)).all(|(a, b)| a.to_bits() == b.to_bits());
            Ok((br.l_align.unwrap_or(f64::NAN), br.l_vsd.unwrap_or(f64::NAN), switch_diff, same_bits))
        })();
        match outcome {
            Ok((align, vsd, diff, same_bits)) => {
                let err = align.abs().max(vsd.abs()).max(diff);
                tally.record(err, align == 0.0 && vsd == 0.0 && same_bits, || {
                    format!("L_Align {align}, L_VSD {vsd}, switch diff {diff:.3e}")
                });
            }
            Err(e) => tally.error(e),
        }
    }
    tally.finish()
}

/// With only `L_VSD` weighted, gradients reach `V^S` and nothing else.
pub fn check_switch_confinement(seed: u64, cases: usize) -> CheckResult {
    let mut rng = rng_for(seed);
    let mut tally = Tally::new("switch-confinement", 0.0);
    let (tc, sc) = tiny_configs();
    let vsd_only = DistillConfig {
        ce_weight: 0.0,
        lambda1: 0.0,
        lambda2: 1.0,
        ..dft_config()
    };
    for _ in 0..cases {
        let outcome = (|| -> Result<_> {
            let teacher = ToyVLM::new(tc, rng.gen())?;
            let mut student = ToyVLM::new(sc, rng.gen())?;
            let samples = tiny_samples(&sc, &mut rng, 3);
            let batch = PreparedBatch::new(&sc, &samples.iter().collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let vars = record_objective(&mut tape, &student, Some(&teacher), &batch, &StageSpec::new(StageName::Dft), &vsd_only)?;
            tape.backward(vars.total)?;
            student.accumulate_grads(&tape, &vars.student)?;
            Ok([Group::Vision, Group::Projector, Group::Language].map(|g| student.grad_norm_sq(g)))
        })();
        match outcome {
            Ok([v, p, l]) => {
                let leak = (p + l).sqrt() + 0.0;
                tally.record(leak, v > 0.0 && p == 0.0 && l == 0.0, || {
                    format!("|g_V|²={v:.3e}, |g_P|²={p:.3e}, |g_L|²={l:.3e}")
                });
            }
            Err(e) => tally.error(e),
        }
    }
    tally.finish()
}

/// A DFT run leaves the teacher untouched and never routes gradient into it.
pub fn check_frozen_teacher(seed: u64, steps: usize) -> CheckResult {
    let mut rng = rng_for(seed);
    let mut tally = Tally::new("frozen-teacher", 0.0);
    let (tc, sc) = tiny_configs();
    let outcome = (|| -> Result<_> {
        let teacher = ToyVLM::new(tc, rng.gen())?;
        let before = teacher.flat_values();
        let mut student = ToyVLM::new(sc, rng.gen())?;
        let train = tiny_samples(&sc, &mut rng, 2 * steps.max(1));
        let cfg = DistillConfig {
            ft: crate::engine::StageHyper {
                learning_rate: 1e-2,
                batch_size: 2,
                epochs: 1,
                ..crate::engine::StageHyper::fine_tuning()
            },
            ..dft_config()
        };
        let state = train_stage(&mut student, Some(&teacher), &train, &[], StageSpec::new(StageName::Dft), &cfg, seed)?;
        let moved = teacher
            .flat_values()
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Ok((state.step, state.teacher_grad_sq, moved))
    })();
    match outcome {
        Ok((n, sq, moved)) => {
            for _ in 0..n {
                tally.record(sq.sqrt().max(moved), sq == 0.0 && moved == 0.0, || {
                    format!("teacher gradient norm² {sq}, max parameter change {moved}")
                });
            }
        }
        Err(e) => tally.error(e),
    }
    tally.finish()
}
