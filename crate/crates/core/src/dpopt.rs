//! Discrete optimal correction of same-skill response states.
//!
//! Each record of a [`StateDifficultySeq`] is a binary-state system
//! `x' = x + u` whose trajectory runs over the later records of the same
//! skill. At every step the record is compared with the next later record
//! (taken at its input state) through the [`Detector`]; a step whose pair
//! still violates a predicate costs `beta`, a control `u != 0` costs `|u|`,
//! and step costs of record `i` are discounted by `gamma^i`. A record flips
//! at most once, so the optimal control is found by backward induction over
//! the trajectory followed by the Bellman minimum at its first step.
//!
//! Only records that are the earlier side of a detected violation may be
//! flipped. Ties prefer holding, which yields the fewest-flips solution.
//! [`brute_force_oracle`] enumerates flip sets for the same objective.
//!
//! [`optimize_student`] applies the solver within partition ranges
//! (subregion stage) and over the whole sequence (overall stage), and
//! repeats both stages until a round changes nothing. A record's decision
//! only depends on later records, so rounds settle from the back of the
//! sequence and the result is a fixed point of the pipeline.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{CoherenceParams, ContinuityParams, Control, DetectError, Detector, FiredSet, PairContext};
use crate::ingest::{Dataset, StudentSequence};
use crate::stats::{extract_in_range, DifficultyTable, IntervalIndex, StateDifficultySeq};

/// Largest flippable set the oracle will enumerate.
pub const ORACLE_LIMIT: usize = 20;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("control {u} takes state {state} outside {{0, 1}}")]
    InvalidControl { state: u8, u: i8 },
    #[error("{0} flippable positions exceed the oracle limit of {ORACLE_LIMIT}")]
    TooManyFlippable(usize),
    #[error("discount must lie in (0, 1], got {0}")]
    Gamma(f64),
    #[error("violation penalty must exceed 1, got {0}")]
    Beta(f64),
    #[error("interval buffer must be positive, got {0}")]
    Mu(f64),
    #[error("partition size must be at least 2, got {0}")]
    PartitionSize(usize),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpParams {
    pub gamma: f64,
    /// Cost of each violation left unresolved.
    pub beta: f64,
    /// Interval performance buffer.
    pub mu: f64,
    #[serde(skip)]
    pub coherence: CoherenceParams,
    #[serde(skip)]
    pub continuity: ContinuityParams,
    /// Use interval-performance clauses and continuity predicates.
    #[serde(skip, default = "default_true")]
    pub performance: bool,
}

impl Default for DpParams {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            beta: 2.0,
            mu: 1.0,
            coherence: CoherenceParams::default(),
            continuity: ContinuityParams::default(),
            performance: true,
        }
    }
}

impl DpParams {
    pub fn validate(&self) -> Result<(), DpError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(DpError::Gamma(self.gamma));
        }
        if !(self.beta > 1.0) {
            return Err(DpError::Beta(self.beta));
        }
        if !(self.mu > 0.0) {
            return Err(DpError::Mu(self.mu));
        }
        self.coherence.validate()?;
        self.continuity.validate()?;
        Ok(())
    }

    pub fn detector(&self) -> Detector {
        Detector {
            coherence: self.coherence,
            continuity: self.continuity,
            performance: self.performance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionParams {
    /// Interactions per interval.
    pub p: usize,
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self { p: 50 }
    }
}

/// Which optimisation stages run: overall (`ov`), subregion (`su`), and
/// interval-performance/continuity predicates (`per`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub ov: bool,
    pub su: bool,
    pub per: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        ov: true,
        su: true,
        per: true,
    };

    pub fn any_optimisation(self) -> bool {
        self.ov || self.su
    }
}

/// Interval performance `T` and gap `L` for a pair of subsequence indices.
pub trait PairTiming {
    fn timing(&self, seq: &StateDifficultySeq, early: usize, late: usize) -> (f64, u32);
}

impl<F> PairTiming for F
where
    F: Fn(&StateDifficultySeq, usize, usize) -> (f64, u32),
{
    fn timing(&self, seq: &StateDifficultySeq, early: usize, late: usize) -> (f64, u32) {
        self(seq, early, late)
    }
}

impl PairTiming for IntervalIndex {
    fn timing(&self, seq: &StateDifficultySeq, early: usize, late: usize) -> (f64, u32) {
        let (a, b) = (seq.entries[early].position, seq.entries[late].position);
        let ctx = self.context(a, b);
        (self.performance(a, b), ctx.gap)
    }
}

pub fn step(state: bool, u: Control) -> Result<bool, DpError> {
    let next = i8::from(state) + u.value();
    match next {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(DpError::InvalidControl {
            state: u8::from(state),
            u: u.value(),
        }),
    }
}

/// `U = |u|`.
pub fn stage_cost(u: Control) -> f64 {
    f64::from(u.value().unsigned_abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub early: usize,
    pub late: usize,
    pub v: Control,
    pub fired: FiredSet,
}

fn pair_context(
    seq: &StateDifficultySeq,
    timing: &impl PairTiming,
    early_state: bool,
    early: usize,
    late: usize,
) -> PairContext {
    let (performance, gap) = timing.timing(seq, early, late);
    PairContext {
        early_state,
        late_state: seq.entries[late].state,
        early_difficulty: seq.entries[early].difficulty,
        late_difficulty: seq.entries[late].difficulty,
        performance,
        gap,
    }
}

/// Every pair `i < j` whose control value is non-zero at the input states.
pub fn violations(seq: &StateDifficultySeq, timing: &impl PairTiming, params: &DpParams) -> Vec<Violation> {
    let det = params.detector();
    let mut out = Vec::new();
    for i in 0..seq.len() {
        for j in i + 1..seq.len() {
            let d = det.decide(&pair_context(seq, timing, seq.entries[i].state, i, j));
            if d.v != Control::Hold {
                out.push(Violation {
                    early: i,
                    late: j,
                    v: d.v,
                    fired: d.fired,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizedSeq {
    pub corrected_states: Vec<bool>,
    /// Flipped subsequence indices, ascending.
    pub flips: Vec<usize>,
    /// Predicates that fired against each flipped record.
    #[serde(skip)]
    pub reasons: Vec<FiredSet>,
    /// Optimal cost `J*`.
    pub total_cost: f64,
    pub residual_violations: usize,
}

impl OptimizedSeq {
    fn unchanged(seq: &StateDifficultySeq) -> Self {
        Self {
            corrected_states: seq.states(),
            flips: Vec::new(),
            reasons: Vec::new(),
            total_cost: 0.0,
            residual_violations: 0,
        }
    }
}

/// Cost-to-go over the trajectory of record `i` for both possible states:
/// `V_k(s) = [pair (i, i+1+k) violates at s] + V_{k+1}(s)`, `V_m(s) = 0`.
/// Returns `V_0` and the predicates that fired at each state.
fn cost_to_go(
    seq: &StateDifficultySeq,
    timing: &impl PairTiming,
    det: &Detector,
    i: usize,
) -> ([usize; 2], [FiredSet; 2]) {
    let mut value = [0usize; 2];
    let mut fired = [FiredSet::default(); 2];
    for j in (i + 1..seq.len()).rev() {
        for s in [false, true] {
            let d = det.decide(&pair_context(seq, timing, s, i, j));
            if d.v != Control::Hold {
                value[usize::from(s)] += 1;
                fired[usize::from(s)] = fired[usize::from(s)].union(d.fired);
            }
        }
    }
    (value, fired)
}

/// Minimum-cost correction of one subsequence.
///
/// `J* = sum_i gamma^i (|u_i| + beta * residual_i)` where `residual_i`
/// counts the later records still in violation with record `i` after its
/// control is applied.
pub fn solve_bellman(seq: &StateDifficultySeq, timing: &impl PairTiming, params: &DpParams) -> OptimizedSeq {
    if seq.len() < 2 {
        return OptimizedSeq::unchanged(seq);
    }
    let det = params.detector();
    let mut out = OptimizedSeq::unchanged(seq);
    let mut total = 0.0;
    for i in 0..seq.len() {
        let entry = &seq.entries[i];
        let discount = params.gamma.powi(i as i32);
        let (value, fired) = cost_to_go(seq, timing, &det, i);
        let held = value[usize::from(entry.state)];
        let flippable = !entry.pinned && held > 0;

        // Bellman minimum at the first step over the admissible controls.
        let mut best = (Control::Hold, 0.0 + params.beta * held as f64, held);
        if flippable {
            let u = if entry.state { Control::Down } else { Control::Up };
            let next = step(entry.state, u).expect("flip stays binary");
            let resid = value[usize::from(next)];
            let cost = stage_cost(u) + params.beta * resid as f64;
            if cost < best.1 {
                best = (u, cost, resid);
            }
        }
        let (u, cost, resid) = best;
        if u != Control::Hold {
            out.corrected_states[i] = !entry.state;
            out.flips.push(i);
            out.reasons.push(fired[usize::from(entry.state)]);
        }
        out.residual_violations += resid;
        total += discount * cost;
    }
    out.total_cost = total;
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub cost: f64,
    pub flips: Vec<usize>,
}

/// Exhaustive minimum of the same objective over all subsets of the
/// flippable records, with ties broken by fewest flips and then the
/// lexicographically smallest flip set.
pub fn brute_force_oracle(
    seq: &StateDifficultySeq,
    timing: &impl PairTiming,
    params: &DpParams,
) -> Result<OracleResult, DpError> {
    let n = seq.len();
    if n < 2 {
        return Ok(OracleResult {
            cost: 0.0,
            flips: Vec::new(),
        });
    }
    let det = params.detector();
    let violates = |early_state: bool, i: usize, j: usize| {
        det.decide(&pair_context(seq, timing, early_state, i, j)).v != Control::Hold
    };
    let flippable: Vec<usize> = (0..n)
        .filter(|&i| !seq.entries[i].pinned && (i + 1..n).any(|j| violates(seq.entries[i].state, i, j)))
        .collect();
    if flippable.len() > ORACLE_LIMIT {
        return Err(DpError::TooManyFlippable(flippable.len()));
    }

    let mut best: Option<OracleResult> = None;
    for mask in 0u32..(1u32 << flippable.len()) {
        let flips: Vec<usize> = flippable
            .iter()
            .enumerate()
            .filter(|(b, _)| mask & (1 << b) != 0)
            .map(|(_, &i)| i)
            .collect();
        let mut states = seq.states();
        for &i in &flips {
            states[i] = !states[i];
        }
        let mut cost = 0.0;
        for i in 0..n {
            let resid = (i + 1..n).filter(|&j| violates(states[i], i, j)).count();
            let u = if states[i] != seq.entries[i].state { 1.0 } else { 0.0 };
            cost += params.gamma.powi(i as i32) * (u + params.beta * resid as f64);
        }
        let better = match &best {
            None => true,
            Some(b) => {
                cost < b.cost || (cost == b.cost && (flips.len(), &flips) < (b.flips.len(), &b.flips))
            }
        };
        if better {
            best = Some(OracleResult { cost, flips });
        }
    }
    Ok(best.expect("at least the empty flip set"))
}

/// Consecutive ranges of `p` positions; a remainder shorter than `p` joins
/// the last range.
pub fn partition(n: usize, p: usize) -> Vec<Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let p = p.max(1);
    let t = (n / p).max(1);
    (0..t)
        .map(|k| k * p..if k + 1 == t { n } else { (k + 1) * p })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub student_id: u64,
    pub position: usize,
    pub skill: u32,
    pub old_state: bool,
    pub new_state: bool,
    pub fired: String,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutcome {
    pub sequence: StudentSequence,
    pub corrections: Vec<Correction>,
    pub rounds: usize,
}

struct Flip {
    position: usize,
    skill: u32,
    fired: FiredSet,
    cost: f64,
}

fn run_stage(
    seq: &StudentSequence,
    ranges: &[Range<usize>],
    table: &DifficultyTable,
    params: &DpParams,
) -> Vec<Flip> {
    let mut flips = Vec::new();
    for range in ranges {
        for sub in extract_in_range(seq, range.clone(), table) {
            let timing = IntervalIndex::new(seq, sub.skill_id, params.mu);
            let solved = solve_bellman(&sub, &timing, params);
            for (&i, &fired) in solved.flips.iter().zip(&solved.reasons) {
                flips.push(Flip {
                    position: sub.entries[i].position,
                    skill: sub.skill_id,
                    fired,
                    cost: params.gamma.powi(i as i32),
                });
            }
        }
    }
    flips
}

/// Correct one student's responses.
///
/// `params.performance` is overridden by `stages.per`.
pub fn optimize_student(
    seq: &StudentSequence,
    table: &DifficultyTable,
    params: &DpParams,
    part: &PartitionParams,
    stages: Stages,
) -> StudentOutcome {
    let params = DpParams {
        performance: stages.per,
        ..*params
    };
    let n = seq.len();
    let mut current = seq.clone();
    let mut last: Vec<Option<Flip>> = (0..n).map(|_| None).collect();
    let mut rounds = 0;
    if stages.any_optimisation() && n >= 2 {
        let whole = [0..n];
        let parts = partition(n, part.p);
        // Decisions settle back to front, one position per round at worst.
        while rounds <= n + 1 {
            rounds += 1;
            let mut changed = false;
            for (enabled, ranges) in [(stages.su, &parts[..]), (stages.ov, &whole[..])] {
                if !enabled {
                    continue;
                }
                let flips = run_stage(&current, ranges, table, &params);
                changed |= !flips.is_empty();
                for flip in flips {
                    let it = &mut current.interactions[flip.position];
                    it.response = !it.response;
                    let pos = flip.position;
                    last[pos] = Some(flip);
                }
            }
            if !changed {
                break;
            }
        }
        if rounds > n + 1 {
            log::warn!("student {}: correction rounds did not settle", seq.student_id);
        }
    }
    let corrections = (0..n)
        .filter(|&i| current.interactions[i].response != seq.interactions[i].response)
        .map(|i| {
            let flip = last[i].as_ref().expect("changed positions were flipped");
            Correction {
                student_id: seq.student_id,
                position: i,
                skill: flip.skill,
                old_state: seq.interactions[i].response,
                new_state: current.interactions[i].response,
                fired: flip.fired.to_string(),
                cost: flip.cost,
            }
        })
        .collect();
    StudentOutcome {
        sequence: current,
        corrections,
        rounds,
    }
}

/// Optimise only the leading `fraction` of the sequence; the rest is
/// copied through untouched.
pub fn optimize_prefix(
    seq: &StudentSequence,
    fraction: f64,
    table: &DifficultyTable,
    params: &DpParams,
    part: &PartitionParams,
    stages: Stages,
) -> StudentOutcome {
    let cut = ((seq.len() as f64 * fraction.clamp(0.0, 1.0)).floor() as usize).min(seq.len());
    let head = StudentSequence {
        student_id: seq.student_id,
        interactions: seq.interactions[..cut].to_vec(),
    };
    let mut out = optimize_student(&head, table, params, part, stages);
    out.sequence
        .interactions
        .extend_from_slice(&seq.interactions[cut..]);
    out
}

/// Optimise every student in parallel. Per-student work is pure, so the
/// result equals a sequential map.
pub fn optimize_dataset(
    dataset: &Dataset,
    table: &DifficultyTable,
    params: &DpParams,
    part: &PartitionParams,
    stages: Stages,
    prefix: Option<f64>,
) -> (Dataset, Vec<Correction>) {
    let outcomes: Vec<StudentOutcome> = dataset
        .sequences
        .par_iter()
        .map(|seq| match prefix {
            Some(f) => optimize_prefix(seq, f, table, params, part, stages),
            None => optimize_student(seq, table, params, part, stages),
        })
        .collect();
    let mut sequences = Vec::with_capacity(outcomes.len());
    let mut corrections = Vec::new();
    for o in outcomes {
        sequences.push(o.sequence);
        corrections.extend(o.corrections);
    }
    let mut out = dataset.clone();
    out.sequences = sequences;
    (out, corrections)
}

pub fn write_corrections_csv(path: &Path, corrections: &[Correction]) -> Result<(), DpError> {
    let io = |source| DpError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "student_id,position,skill,old_state,new_state,fired_predicate,cost").map_err(io)?;
    for c in corrections {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            c.student_id,
            c.position,
            c.skill,
            u8::from(c.old_state),
            u8::from(c.new_state),
            c.fired,
            c.cost
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::Predicate;
    use crate::ingest::Interaction;
    use crate::stats::{QuestionCounts, StateEntry};
    use proptest::prelude::*;

    fn sub(states: &[u8], df: &[f64]) -> StateDifficultySeq {
        StateDifficultySeq {
            skill_id: 0,
            entries: states
                .iter()
                .zip(df)
                .enumerate()
                .map(|(i, (&s, &d))| StateEntry::new(s == 1, d, i))
                .collect(),
        }
    }

    fn fixed(t: f64) -> impl Fn(&StateDifficultySeq, usize, usize) -> (f64, u32) {
        move |s: &StateDifficultySeq, i: usize, j: usize| {
            (t, (s.entries[j].position - s.entries[i].position) as u32)
        }
    }

    #[test]
    fn step_examples() {
        assert!(step(false, Control::Up).unwrap());
        assert!(!step(true, Control::Down).unwrap());
        assert!(step(true, Control::Hold).unwrap());
        assert!(!step(false, Control::Hold).unwrap());
        assert!(matches!(step(true, Control::Up), Err(DpError::InvalidControl { .. })));
        assert!(matches!(step(false, Control::Down), Err(DpError::InvalidControl { .. })));
    }

    #[test]
    fn stage_cost_examples() {
        assert_eq!(stage_cost(Control::Up), 1.0);
        assert_eq!(stage_cost(Control::Down), 1.0);
        assert_eq!(stage_cost(Control::Hold), 0.0);
    }

    #[test]
    fn violation_examples() {
        let p = DpParams::default();
        let v = violations(&sub(&[0, 1], &[0.10, 0.95]), &fixed(1.2), &p);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].early, v[0].late, v[0].v), (0, 1, Control::Up));

        assert!(violations(&sub(&[1, 1], &[0.10, 0.95]), &fixed(1.2), &p).is_empty());

        // Pairs by hand: (0,1) 1>0, 0.95>0.10, gap 0.85, T<H -> coh2.
        // (0,2) 1>0, 0.95>0.12, gap 0.83 -> coh2. (1,2) equal states -> none.
        let v = violations(&sub(&[1, 0, 0], &[0.95, 0.10, 0.12]), &fixed(0.3), &p);
        let pairs: Vec<_> = v.iter().map(|x| (x.early, x.late, x.v)).collect();
        assert_eq!(pairs, vec![(0, 1, Control::Down), (0, 2, Control::Down)]);
    }

    #[test]
    fn solve_examples() {
        let p = DpParams::default();
        let s = sub(&[1, 0], &[0.95, 0.10]);
        let out = solve_bellman(&s, &fixed(0.3), &p);
        assert_eq!(out.flips, vec![0]);
        assert_eq!(out.corrected_states, vec![false, false]);
        assert_eq!(out.total_cost, 1.0);
        assert_eq!(out.residual_violations, 0);
        assert!(out.reasons[0].contains(Predicate::Coh2));

        let s = sub(&[1, 1, 0], &[0.5, 0.5, 0.5]);
        let out = solve_bellman(&s, &fixed(1.5), &p);
        assert!(out.flips.is_empty());
        assert_eq!(out.total_cost, 0.0);
        assert_eq!(out.corrected_states, s.states());

        let s = sub(&[0, 1, 1], &[0.10, 0.95, 0.92]);
        assert_eq!(violations(&s, &fixed(1.2), &p).len(), 2);
        let out = solve_bellman(&s, &fixed(1.2), &p);
        assert_eq!(out.flips, vec![0]);
        assert_eq!(out.total_cost, 1.0);

        let short = sub(&[1], &[0.9]);
        let out = solve_bellman(&short, &fixed(0.3), &p);
        assert_eq!((out.total_cost, out.flips.len()), (0.0, 0));
    }

    #[test]
    fn oracle_matches_examples() {
        let p = DpParams::default();
        for (states, df, t) in [
            (vec![1, 0], vec![0.95, 0.10], 0.3),
            (vec![0, 1, 1], vec![0.10, 0.95, 0.92], 1.2),
            (vec![1, 1, 0], vec![0.5, 0.5, 0.5], 1.5),
            (vec![1, 0, 0], vec![0.95, 0.10, 0.12], 0.3),
        ] {
            let s = sub(&states, &df);
            let dp = solve_bellman(&s, &fixed(t), &p);
            let oracle = brute_force_oracle(&s, &fixed(t), &p).unwrap();
            assert_eq!((dp.total_cost, dp.flips), (oracle.cost, oracle.flips));
        }
        let empty = brute_force_oracle(&sub(&[1, 1], &[0.2, 0.3]), &fixed(1.0), &p).unwrap();
        assert_eq!((empty.cost, empty.flips.len()), (0.0, 0));
    }

    #[test]
    fn oracle_refuses_large_sets() {
        let n = 2 * ORACLE_LIMIT + 4;
        // Alternating 1/0 on a hard/easy ladder gives every 1 a coh2 partner.
        let states: Vec<u8> = (0..n).map(|i| (i % 2 == 0) as u8).collect();
        let df: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.95 } else { 0.05 }).collect();
        let err = brute_force_oracle(&sub(&states, &df), &fixed(0.3), &DpParams::default()).unwrap_err();
        assert!(matches!(err, DpError::TooManyFlippable(k) if k > ORACLE_LIMIT));
    }

    #[test]
    fn pinned_entries_never_flip() {
        let mut s = sub(&[1, 0], &[0.95, 0.10]);
        s.entries[0].pinned = true;
        let out = solve_bellman(&s, &fixed(0.3), &DpParams::default());
        assert!(out.flips.is_empty());
        assert_eq!(out.total_cost, 2.0);
        assert_eq!(out.residual_violations, 1);
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition(23, 10), vec![0..10, 10..23]);
        assert_eq!(partition(20, 10), vec![0..10, 10..20]);
        assert_eq!(partition(7, 10), vec![0..7]);
        assert!(partition(0, 10).is_empty());
    }

    fn table_with(rates: &[(u64, u64)]) -> DifficultyTable {
        DifficultyTable::from_counts(
            rates
                .iter()
                .map(|&(m, c)| QuestionCounts {
                    attempts: m,
                    corrects: c,
                })
                .collect(),
        )
    }

    // Question 0 is hard (d = 1 - 1/12), question 1 easy (d = 1/12).
    fn hard_easy() -> DifficultyTable {
        table_with(&[(10, 0), (10, 10)])
    }

    fn student(items: &[(u32, u32, bool)]) -> StudentSequence {
        StudentSequence::new(
            3,
            items.iter().map(|&(q, k, r)| Interaction::new(q, k, r)).collect(),
        )
    }

    #[test]
    fn flags_off_is_identity() {
        let seq = student(&[(0, 0, true), (1, 0, false)]);
        let out = optimize_student(&seq, &hard_easy(), &DpParams::default(), &PartitionParams::default(), Stages::default());
        assert_eq!(out.sequence, seq);
        assert!(out.corrections.is_empty());
    }

    #[test]
    fn overall_stage_flips_the_guess() {
        // Right on the hard question, then wrong on the easy one: a guess.
        let seq = student(&[(0, 0, true), (1, 0, false)]);
        let stages = Stages {
            ov: true,
            ..Stages::default()
        };
        let out = optimize_student(&seq, &hard_easy(), &DpParams::default(), &PartitionParams::default(), stages);
        assert!(!out.sequence.interactions[0].response);
        assert!(!out.sequence.interactions[1].response);
        assert_eq!(out.corrections.len(), 1);
        let c = &out.corrections[0];
        assert_eq!((c.position, c.old_state, c.new_state), (0, true, false));
        assert_eq!(c.fired, "A_coh2");
    }

    #[test]
    fn ablation_grid_names() {
        let names: Vec<String> = (0..8)
            .map(|bits| {
                let s = Stages {
                    ov: bits & 1 != 0,
                    su: bits & 2 != 0,
                    per: bits & 4 != 0,
                };
                crate::pipeline::Variant {
                    be: false,
                    stages: s,
                }
                .name()
            })
            .collect();
        assert_eq!(
            names,
            vec![
                "DKT",
                "DKT+ov",
                "DKT+su",
                "DKT+ov+su",
                "DKT+per",
                "DKT+ov+per",
                "DKT+su+per",
                "DKT+ov+su+per"
            ]
        );
    }

    #[test]
    fn prefix_leaves_tail_untouched() {
        let seq = student(&[(1, 0, true), (1, 0, true), (0, 0, true), (1, 0, false)]);
        let stages = Stages {
            ov: true,
            ..Stages::default()
        };
        let p = DpParams::default();
        let part = PartitionParams::default();
        let none = optimize_prefix(&seq, 0.0, &hard_easy(), &p, &part, stages);
        assert_eq!(none.sequence, seq);
        let full = optimize_prefix(&seq, 1.0, &hard_easy(), &p, &part, stages);
        assert_eq!(full.sequence, optimize_student(&seq, &hard_easy(), &p, &part, stages).sequence);
        assert!(!full.sequence.interactions[2].response);
        let half = optimize_prefix(&seq, 0.5, &hard_easy(), &p, &part, stages);
        assert_eq!(half.sequence, seq);
    }

    fn arb_student() -> impl Strategy<Value = (StudentSequence, DifficultyTable)> {
        (
            proptest::collection::vec((0u32..6, 0u32..3, any::<bool>()), 2..40),
            proptest::collection::vec((1u64..20, 0u64..20), 6),
        )
            .prop_map(|(items, rates)| {
                let rates: Vec<(u64, u64)> = rates.into_iter().map(|(m, c)| (m, c.min(m))).collect();
                (student(&items), table_with(&rates))
            })
    }

    fn arb_stages() -> impl Strategy<Value = Stages> {
        (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(ov, su, per)| Stages { ov, su, per })
    }

    proptest! {
        #[test]
        fn idempotent_and_conserving((seq, table) in arb_student(), stages in arb_stages(), p in 2usize..12) {
            let params = DpParams { coherence: CoherenceParams { alpha: 0.5, ..Default::default() }, ..Default::default() };
            let part = PartitionParams { p };
            let once = optimize_student(&seq, &table, &params, &part, stages);
            let twice = optimize_student(&once.sequence, &table, &params, &part, stages);
            prop_assert_eq!(&twice.sequence, &once.sequence);
            prop_assert!(twice.corrections.is_empty());
            prop_assert_eq!(once.sequence.len(), seq.len());
            for (a, b) in once.sequence.interactions.iter().zip(&seq.interactions) {
                prop_assert_eq!((a.question_id, a.skill_id, a.order), (b.question_id, b.skill_id, b.order));
            }
        }

        #[test]
        fn flips_follow_the_fired_direction(states in proptest::collection::vec(0u8..2, 2..12),
                                           df in proptest::collection::vec(0.0..1.0f64, 12),
                                           t in 0.0..3.0f64) {
            let s = sub(&states, &df[..states.len()]);
            let out = solve_bellman(&s, &fixed(t), &DpParams::default());
            for (&i, fired) in out.flips.iter().zip(&out.reasons) {
                if states[i] == 0 {
                    prop_assert!(fired.contains(Predicate::Coh1) || fired.contains(Predicate::Con1));
                } else {
                    prop_assert!(fired.contains(Predicate::Coh2) || fired.contains(Predicate::Con2));
                }
            }
            let changed: Vec<usize> = (0..states.len()).filter(|&i| out.corrected_states[i] != (states[i] == 1)).collect();
            prop_assert_eq!(changed, out.flips.clone());
            // gamma = 1: J* = flips + beta * residual.
            prop_assert_eq!(out.total_cost, out.flips.len() as f64 + 2.0 * out.residual_violations as f64);
        }

        #[test]
        fn cost_monotone_in_beta(states in proptest::collection::vec(0u8..2, 2..12),
                                 df in proptest::collection::vec(0.0..1.0f64, 12),
                                 t in 0.0..3.0f64, b1 in 1.01..5.0f64, db in 0.0..5.0f64) {
            let s = sub(&states, &df[..states.len()]);
            let lo = solve_bellman(&s, &fixed(t), &DpParams { beta: b1, ..Default::default() });
            let hi = solve_bellman(&s, &fixed(t), &DpParams { beta: b1 + db, ..Default::default() });
            prop_assert!(hi.total_cost >= lo.total_cost);
        }
    }

    #[test]
    fn parallel_equals_sequential() {
        let (ds, _) = crate::synth::generate(&crate::synth::SynthConfig {
            n_students: 40,
            seq_len: 60,
            ..Default::default()
        });
        let table = crate::stats::compute_difficulty(&ds);
        let p = DpParams::default();
        let part = PartitionParams { p: 20 };
        let (par, corr) = optimize_dataset(&ds, &table, &p, &part, Stages::ALL, None);
        let seq: Vec<StudentSequence> = ds
            .sequences
            .iter()
            .map(|s| optimize_student(s, &table, &p, &part, Stages::ALL).sequence)
            .collect();
        assert_eq!(par.sequences, seq);
        assert!(!corr.is_empty());
    }
}
