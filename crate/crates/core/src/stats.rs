//! Question difficulty, interval performance and same-skill subsequences.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Dataset, StudentSequence};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("interval gap must be at least 1")]
    ZeroGap,
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionCounts {
    pub attempts: u64,
    pub corrects: u64,
}

/// Per-question correct rates with Laplace smoothing, `P = (C + 1) / (M + 2)`.
///
/// Questions never attempted fall back to the smoothed rate over all
/// attempts, so a table built on a training split can score test questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyTable {
    counts: Vec<QuestionCounts>,
    fallback_rate: f64,
}

impl DifficultyTable {
    pub fn from_counts(counts: Vec<QuestionCounts>) -> Self {
        let (m, c) = counts
            .iter()
            .fold((0u64, 0u64), |(m, c), q| (m + q.attempts, c + q.corrects));
        Self {
            counts,
            fallback_rate: (c as f64 + 1.0) / (m as f64 + 2.0),
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn counts(&self, question: u32) -> QuestionCounts {
        self.counts.get(question as usize).copied().unwrap_or_default()
    }

    /// Plain `C / M`, absent for unattempted questions.
    pub fn unsmoothed_rate(&self, question: u32) -> Option<f64> {
        let q = self.counts(question);
        (q.attempts > 0).then(|| q.corrects as f64 / q.attempts as f64)
    }

    /// Smoothed correct rate `P`, in (0, 1).
    pub fn correct_rate(&self, question: u32) -> f64 {
        let q = self.counts(question);
        if q.attempts == 0 {
            self.fallback_rate
        } else {
            (q.corrects as f64 + 1.0) / (q.attempts as f64 + 2.0)
        }
    }

    /// `D = 1 / P`, at least 1.
    pub fn raw_difficulty(&self, question: u32) -> f64 {
        1.0 / self.correct_rate(question)
    }

    /// `d = 1 - P`, in (0, 1). Used by every threshold comparison.
    pub fn difficulty(&self, question: u32) -> f64 {
        1.0 - self.correct_rate(question)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), StatsError> {
        let io = |source| StatsError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "question_id,M,C,P,D,d").map_err(io)?;
        for q in 0..self.counts.len() as u32 {
            let c = self.counts(q);
            writeln!(
                w,
                "{q},{},{},{},{},{}",
                c.attempts,
                c.corrects,
                self.correct_rate(q),
                self.raw_difficulty(q),
                self.difficulty(q)
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

pub fn compute_difficulty(dataset: &Dataset) -> DifficultyTable {
    let mut counts = vec![QuestionCounts::default(); dataset.num_questions];
    for it in dataset.interactions() {
        let q = &mut counts[it.question_id as usize];
        q.attempts += 1;
        q.corrects += u64::from(it.response);
    }
    DifficultyTable::from_counts(counts)
}

/// Write normalised difficulties onto every interaction.
pub fn apply_difficulty(dataset: &mut Dataset, table: &DifficultyTable) {
    for seq in &mut dataset.sequences {
        for it in &mut seq.interactions {
            it.difficulty = table.difficulty(it.question_id);
        }
    }
}

/// Counts over the strict interior of an interval between two interactions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalContext {
    /// Correct answers on the relevant skill.
    pub r1: u32,
    /// Correct answers on any skill.
    pub r2: u32,
    /// Interactions on the relevant skill.
    pub skn: u32,
    /// Position distance between the two interactions.
    pub gap: u32,
    pub mu: f64,
}

/// `T = R1 / (skn + mu) + R2 / L + skn / L`.
pub fn interval_performance(ctx: &IntervalContext) -> Result<f64, StatsError> {
    if ctx.gap == 0 {
        return Err(StatsError::ZeroGap);
    }
    let gap = f64::from(ctx.gap);
    Ok(f64::from(ctx.r1) / (f64::from(ctx.skn) + ctx.mu)
        + f64::from(ctx.r2) / gap
        + f64::from(ctx.skn) / gap)
}

/// Prefix counts over one student sequence for one skill, giving any
/// interval's context in O(1).
#[derive(Debug, Clone)]
pub struct IntervalIndex {
    correct: Vec<u32>,
    on_skill: Vec<u32>,
    correct_on_skill: Vec<u32>,
    mu: f64,
}

impl IntervalIndex {
    pub fn new(seq: &StudentSequence, skill: u32, mu: f64) -> Self {
        let n = seq.len();
        let mut correct = Vec::with_capacity(n + 1);
        let mut on_skill = Vec::with_capacity(n + 1);
        let mut correct_on_skill = Vec::with_capacity(n + 1);
        let (mut a, mut b, mut c) = (0, 0, 0);
        correct.push(0);
        on_skill.push(0);
        correct_on_skill.push(0);
        for it in &seq.interactions {
            let hit = it.has_skill(skill);
            a += u32::from(it.response);
            b += u32::from(hit);
            c += u32::from(hit && it.response);
            correct.push(a);
            on_skill.push(b);
            correct_on_skill.push(c);
        }
        Self {
            correct,
            on_skill,
            correct_on_skill,
            mu,
        }
    }

    /// Context for the interactions at sequence positions `early < late`;
    /// both endpoints are excluded from the counts.
    pub fn context(&self, early: usize, late: usize) -> IntervalContext {
        debug_assert!(early < late);
        let inner = |p: &[u32]| p[late] - p[early + 1];
        IntervalContext {
            r1: inner(&self.correct_on_skill),
            r2: inner(&self.correct),
            skn: inner(&self.on_skill),
            gap: (late - early) as u32,
            mu: self.mu,
        }
    }

    pub fn performance(&self, early: usize, late: usize) -> f64 {
        interval_performance(&self.context(early, late)).expect("early < late gives a positive gap")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateEntry {
    pub state: bool,
    pub difficulty: f64,
    /// Index into the owning student sequence.
    pub position: usize,
    /// Set when this skill is not the interaction's primary skill: the
    /// entry still serves as evidence but is never flipped through this
    /// subsequence.
    #[serde(default)]
    pub pinned: bool,
}

impl StateEntry {
    pub fn new(state: bool, difficulty: f64, position: usize) -> Self {
        Self {
            state,
            difficulty,
            position,
            pinned: false,
        }
    }
}

/// Same-skill (state, difficulty) subsequence of one student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDifficultySeq {
    pub skill_id: u32,
    pub entries: Vec<StateEntry>,
}

impl StateDifficultySeq {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn states(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.state).collect()
    }
}

/// One subsequence per skill seen at least twice in the whole sequence.
pub fn extract_skill_subsequences(seq: &StudentSequence, table: &DifficultyTable) -> Vec<StateDifficultySeq> {
    extract_in_range(seq, 0..seq.len(), table)
}

/// As [`extract_skill_subsequences`], restricted to positions in `range`.
pub fn extract_in_range(seq: &StudentSequence, range: Range<usize>, table: &DifficultyTable) -> Vec<StateDifficultySeq> {
    let mut by_skill: BTreeMap<u32, Vec<StateEntry>> = BTreeMap::new();
    for pos in range {
        let it = &seq.interactions[pos];
        let df = table.difficulty(it.question_id);
        for skill in it.skills() {
            by_skill.entry(skill).or_default().push(StateEntry {
                state: it.response,
                difficulty: df,
                position: pos,
                pinned: skill != it.skill_id,
            });
        }
    }
    by_skill
        .into_iter()
        .filter(|(_, e)| e.len() >= 2)
        .map(|(skill_id, entries)| StateDifficultySeq { skill_id, entries })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Interaction;
    use proptest::prelude::*;

    fn table(m: u64, c: u64) -> DifficultyTable {
        DifficultyTable::from_counts(vec![QuestionCounts {
            attempts: m,
            corrects: c,
        }])
    }

    #[test]
    fn difficulty_examples() {
        let t = table(8, 4);
        assert_eq!(t.unsmoothed_rate(0), Some(0.5));
        assert_eq!(1.0 / t.unsmoothed_rate(0).unwrap(), 2.0);
        assert!((t.correct_rate(0) - 0.5).abs() < 1e-12);
        assert!((t.difficulty(0) - 0.5).abs() < 1e-12);

        let t = table(5, 5);
        assert!((t.correct_rate(0) - 6.0 / 7.0).abs() < 1e-12);
        assert!((t.raw_difficulty(0) - 7.0 / 6.0).abs() < 1e-12);
        assert!((t.difficulty(0) - 1.0 / 7.0).abs() < 1e-12);

        let t = table(4, 0);
        assert!((t.correct_rate(0) - 1.0 / 6.0).abs() < 1e-12);
        assert!((t.raw_difficulty(0) - 6.0).abs() < 1e-12);
        assert!((t.difficulty(0) - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(t.unsmoothed_rate(0), Some(0.0));
    }

    #[test]
    fn unseen_question_uses_global_rate() {
        let t = DifficultyTable::from_counts(vec![
            QuestionCounts {
                attempts: 3,
                corrects: 3,
            },
            QuestionCounts::default(),
        ]);
        assert!((t.correct_rate(1) - 4.0 / 5.0).abs() < 1e-12);
        assert_eq!(t.correct_rate(9), t.correct_rate(1));
        assert_eq!(t.unsmoothed_rate(1), None);
    }

    #[test]
    fn interval_examples() {
        let t = |r1, r2, skn, gap| {
            interval_performance(&IntervalContext {
                r1,
                r2,
                skn,
                gap,
                mu: 1.0,
            })
            .unwrap()
        };
        assert!((t(2, 3, 4, 5) - 1.8).abs() < 1e-12);
        assert_eq!(t(0, 0, 0, 2), 0.0);
        assert!((t(3, 4, 3, 6) - (0.75 + 4.0 / 6.0 + 0.5)).abs() < 1e-12);
        assert!(matches!(
            interval_performance(&IntervalContext {
                r1: 0,
                r2: 0,
                skn: 0,
                gap: 0,
                mu: 1.0
            }),
            Err(StatsError::ZeroGap)
        ));
    }

    fn seq_of(skills: &[u32], responses: &[bool]) -> StudentSequence {
        let its = skills
            .iter()
            .zip(responses)
            .enumerate()
            .map(|(q, (&k, &r))| Interaction::new(q as u32, k, r))
            .collect();
        StudentSequence::new(0, its)
    }

    #[test]
    fn interval_index_counts_strict_interior() {
        // positions: 0 1 2 3 4 ; skills 7 3 7 7 3
        let seq = seq_of(&[7, 3, 7, 7, 3], &[false, true, true, false, true]);
        let idx = IntervalIndex::new(&seq, 7, 1.0);
        let ctx = idx.context(0, 4);
        assert_eq!((ctx.r1, ctx.r2, ctx.skn, ctx.gap), (1, 2, 2, 4));
        let ctx = idx.context(2, 3);
        assert_eq!((ctx.r1, ctx.r2, ctx.skn, ctx.gap), (0, 0, 0, 1));
        assert_eq!(idx.performance(2, 3), 0.0);
    }

    #[test]
    fn extraction_examples() {
        let seq = seq_of(&[7, 7, 3, 7], &[true, false, true, true]);
        let t = DifficultyTable::from_counts(vec![QuestionCounts::default(); 4]);
        let subs = extract_skill_subsequences(&seq, &t);
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].skill_id, 7);
        assert_eq!(
            subs[0].entries.iter().map(|e| e.position).collect::<Vec<_>>(),
            vec![0, 1, 3]
        );

        let distinct = seq_of(&[1, 2, 3], &[true, true, false]);
        assert!(extract_skill_subsequences(&distinct, &t).is_empty());

        let thirty = seq_of(&[5; 30], &[true; 30]);
        let subs = extract_skill_subsequences(&thirty, &t);
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].len(), 30);
    }

    #[test]
    fn secondary_skill_entries_are_pinned() {
        let mut a = Interaction::new(0, 1, true);
        a.extra_skills.push(2);
        let seq = StudentSequence::new(0, vec![a, Interaction::new(1, 2, false), Interaction::new(2, 1, true)]);
        let t = DifficultyTable::from_counts(vec![QuestionCounts::default(); 3]);
        let subs = extract_skill_subsequences(&seq, &t);
        assert_eq!(subs.len(), 2);
        assert!(!subs[0].entries[0].pinned);
        assert!(subs[1].entries[0].pinned);
        assert!(!subs[1].entries[1].pinned);
    }

    proptest! {
        #[test]
        fn difficulty_monotone(m in 1u64..500, c in 0u64..500) {
            prop_assume!(c < m);
            let lo = table(m, c).difficulty(0);
            let hi = table(m, c + 1).difficulty(0);
            prop_assert!(hi < lo);
            let p = table(m, c).correct_rate(0);
            prop_assert!(p > 0.0 && p < 1.0);
            prop_assert!((table(m, c).raw_difficulty(0) * p - 1.0).abs() < 1e-12);
            // More wrong answers with C fixed means harder.
            prop_assert!(table(m + 1, c).difficulty(0) > lo);
        }

        #[test]
        fn performance_bound(r1 in 0u32..50, extra in 0u32..50, skn_extra in 0u32..50, gap in 1u32..200, mu in 0.01f64..5.0) {
            let skn = r1 + skn_extra;
            let r2 = r1 + extra;
            let ctx = IntervalContext { r1, r2, skn, gap, mu };
            let t = interval_performance(&ctx).unwrap();
            prop_assert!(t >= 0.0);
            let bound = f64::from(skn) / (f64::from(skn) + mu) + f64::from(r2 + skn) / f64::from(gap);
            prop_assert!(t <= bound + 1e-12);
        }

        #[test]
        fn extraction_is_projection(skills in proptest::collection::vec(0u32..5, 1..60)) {
            let responses: Vec<bool> = skills.iter().map(|k| k % 2 == 0).collect();
            let seq = seq_of(&skills, &responses);
            let t = DifficultyTable::from_counts(vec![QuestionCounts::default(); skills.len()]);
            let subs = extract_skill_subsequences(&seq, &t);
            let mut seen = std::collections::BTreeSet::new();
            for sub in &subs {
                prop_assert!(sub.len() >= 2);
                prop_assert!(sub.entries.windows(2).all(|w| w[0].position < w[1].position));
                for e in &sub.entries {
                    prop_assert!(e.position < skills.len());
                    prop_assert_eq!(skills[e.position], sub.skill_id);
                    prop_assert!(seen.insert(e.position));
                }
            }
        }
    }
}
