//! Coherence and continuity predicates over a pair of same-skill
//! interactions, and the control value they prescribe for the earlier one.
//!
//! All comparisons are strict as written except the difficulty gap, which
//! fires at `>= alpha`. Ties at `h`, `H`, `Y` and `y` do not fire.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("alpha must lie in (0, 1], got {0}")]
    Alpha(f64),
    #[error("performance bounds need 0 <= h < H, got h={0} H={1}")]
    Bounds(f64, f64),
    #[error("gap bounds need 1 <= e < Lmax, got e={0} Lmax={1}")]
    Gaps(u32, u32),
    #[error("continuity thresholds need y < Y, got y={0} Y={1}")]
    Thresholds(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoherenceParams {
    /// Minimum difficulty gap.
    pub alpha: f64,
    /// Lower performance bound `h`.
    #[serde(rename = "h")]
    pub lower: f64,
    /// Upper performance bound `H`.
    #[serde(rename = "H")]
    pub upper: f64,
}

impl Default for CoherenceParams {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            lower: 0.7,
            upper: 2.8,
        }
    }
}

impl CoherenceParams {
    pub fn validate(&self) -> Result<(), DetectError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(DetectError::Alpha(self.alpha));
        }
        if !(self.lower >= 0.0 && self.lower < self.upper) {
            return Err(DetectError::Bounds(self.lower, self.upper));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuityParams {
    /// Gaps must exceed `e`.
    #[serde(rename = "e")]
    pub min_gap: u32,
    /// Gaps may not exceed `Lmax`.
    #[serde(rename = "Lmax")]
    pub max_gap: u32,
    /// Excellent-performance threshold `Y`.
    #[serde(rename = "Y")]
    pub excellent: f64,
    /// Poor-performance threshold `y`.
    #[serde(rename = "y")]
    pub poor: f64,
}

impl Default for ContinuityParams {
    fn default() -> Self {
        Self {
            min_gap: 2,
            max_gap: 7,
            excellent: 2.0,
            poor: 0.9,
        }
    }
}

impl ContinuityParams {
    pub fn validate(&self) -> Result<(), DetectError> {
        if !(self.min_gap >= 1 && self.min_gap < self.max_gap) {
            return Err(DetectError::Gaps(self.min_gap, self.max_gap));
        }
        if !(self.poor < self.excellent) {
            return Err(DetectError::Thresholds(self.poor, self.excellent));
        }
        Ok(())
    }

    fn gap_ok(&self, gap: u32) -> bool {
        gap > self.min_gap && gap <= self.max_gap
    }
}

/// Arguments of the control function for one (earlier, later) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairContext {
    pub early_state: bool,
    pub late_state: bool,
    pub early_difficulty: f64,
    pub late_difficulty: f64,
    /// Interval performance `T`.
    pub performance: f64,
    /// Position distance `L`.
    pub gap: u32,
}

impl PairContext {
    fn rising(&self) -> bool {
        !self.early_state && self.late_state
    }

    fn falling(&self) -> bool {
        self.early_state && !self.late_state
    }

    fn wide(&self, alpha: f64) -> bool {
        (self.early_difficulty - self.late_difficulty).abs() >= alpha
    }
}

/// Incoherence of the first kind: wrong on the easier earlier question,
/// right on a much harder later one, with decent interval performance.
pub fn coh1(ctx: &PairContext, p: &CoherenceParams) -> bool {
    ctx.rising()
        && ctx.early_difficulty < ctx.late_difficulty
        && ctx.wide(p.alpha)
        && ctx.performance > p.lower
}

/// Incoherence of the second kind: right on the harder earlier question,
/// wrong on a much easier later one, with limited interval performance.
pub fn coh2(ctx: &PairContext, p: &CoherenceParams) -> bool {
    ctx.falling()
        && ctx.early_difficulty > ctx.late_difficulty
        && ctx.wide(p.alpha)
        && ctx.performance < p.upper
}

pub fn con1(ctx: &PairContext, p: &ContinuityParams) -> bool {
    ctx.rising() && ctx.performance > p.excellent && p.gap_ok(ctx.gap)
}

pub fn con2(ctx: &PairContext, p: &ContinuityParams) -> bool {
    ctx.falling() && ctx.performance < p.poor && p.gap_ok(ctx.gap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Predicate {
    Coh1,
    Coh2,
    Con1,
    Con2,
}

impl Predicate {
    pub const ALL: [Predicate; 4] = [Self::Coh1, Self::Coh2, Self::Con1, Self::Con2];

    fn bit(self) -> u8 {
        1 << self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Coh1 => "A_coh1",
            Self::Coh2 => "A_coh2",
            Self::Con1 => "B_con1",
            Self::Con2 => "B_con2",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct FiredSet(u8);

impl FiredSet {
    pub fn insert(&mut self, p: Predicate) {
        self.0 |= p.bit();
    }

    pub fn contains(self, p: Predicate) -> bool {
        self.0 & p.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: FiredSet) -> FiredSet {
        FiredSet(self.0 | other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Predicate> {
        Predicate::ALL.into_iter().filter(move |p| self.contains(*p))
    }
}

impl FromIterator<Predicate> for FiredSet {
    fn from_iter<I: IntoIterator<Item = Predicate>>(iter: I) -> Self {
        let mut s = FiredSet::default();
        for p in iter {
            s.insert(p);
        }
        s
    }
}

impl fmt::Display for FiredSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Predicate::name).collect();
        f.write_str(&names.join("|"))
    }
}

/// Control value `u` in {-1, 0, +1}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Control {
    Down,
    Hold,
    Up,
}

impl Control {
    pub fn value(self) -> i8 {
        match self {
            Self::Down => -1,
            Self::Hold => 0,
            Self::Up => 1,
        }
    }

    pub fn from_value(v: i8) -> Option<Self> {
        match v {
            -1 => Some(Self::Down),
            0 => Some(Self::Hold),
            1 => Some(Self::Up),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlDecision {
    pub v: Control,
    pub fired: FiredSet,
}

/// Predicate configuration used by the optimiser.
///
/// With `performance` off the interval-performance clauses of the coherence
/// predicates are treated as satisfied and the continuity predicates (which
/// are defined by performance) are disabled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detector {
    pub coherence: CoherenceParams,
    pub continuity: ContinuityParams,
    pub performance: bool,
}

impl Detector {
    pub fn decide(&self, ctx: &PairContext) -> ControlDecision {
        let mut fired = FiredSet::default();
        if self.performance {
            if coh1(ctx, &self.coherence) {
                fired.insert(Predicate::Coh1);
            }
            if coh2(ctx, &self.coherence) {
                fired.insert(Predicate::Coh2);
            }
            if con1(ctx, &self.continuity) {
                fired.insert(Predicate::Con1);
            }
            if con2(ctx, &self.continuity) {
                fired.insert(Predicate::Con2);
            }
        } else {
            let free = CoherenceParams {
                lower: f64::NEG_INFINITY,
                upper: f64::INFINITY,
                ..self.coherence
            };
            if coh1(ctx, &free) {
                fired.insert(Predicate::Coh1);
            }
            if coh2(ctx, &free) {
                fired.insert(Predicate::Coh2);
            }
        }
        let v = if fired.contains(Predicate::Coh1) || fired.contains(Predicate::Con1) {
            Control::Up
        } else if fired.contains(Predicate::Coh2) || fired.contains(Predicate::Con2) {
            Control::Down
        } else {
            Control::Hold
        };
        ControlDecision { v, fired }
    }
}

/// The control value: `+1` if a first-kind predicate holds, else `-1` if a
/// second-kind predicate holds, else `0`.
pub fn control_v(ctx: &PairContext, coh: &CoherenceParams, con: &ContinuityParams) -> ControlDecision {
    Detector {
        coherence: *coh,
        continuity: *con,
        performance: true,
    }
    .decide(ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx(states: (u8, u8), df: (f64, f64), t: f64, gap: u32) -> PairContext {
        PairContext {
            early_state: states.0 == 1,
            late_state: states.1 == 1,
            early_difficulty: df.0,
            late_difficulty: df.1,
            performance: t,
            gap,
        }
    }

    const COH: CoherenceParams = CoherenceParams {
        alpha: 0.8,
        lower: 0.7,
        upper: 2.8,
    };
    const CON: ContinuityParams = ContinuityParams {
        min_gap: 2,
        max_gap: 7,
        excellent: 2.0,
        poor: 0.9,
    };

    #[test]
    fn defaults() {
        assert_eq!(CoherenceParams::default(), COH);
        assert_eq!(ContinuityParams::default(), CON);
    }

    #[test]
    fn coh1_examples() {
        assert!(coh1(&ctx((0, 1), (0.10, 0.95), 1.2, 1), &COH));
        assert!(!coh1(&ctx((1, 1), (0.10, 0.95), 1.2, 1), &COH));
        assert!(!coh1(&ctx((0, 1), (0.10, 0.95), 0.5, 1), &COH));
        // Tie on h does not fire.
        assert!(!coh1(&ctx((0, 1), (0.10, 0.95), 0.7, 1), &COH));
    }

    #[test]
    fn coh2_examples() {
        assert!(coh2(&ctx((1, 0), (0.95, 0.10), 0.3, 1), &COH));
        assert!(!coh2(&ctx((1, 0), (0.95, 0.10), 3.0, 1), &COH));
        assert!(!coh2(&ctx((0, 0), (0.95, 0.10), 0.3, 1), &COH));
    }

    #[test]
    fn con1_examples() {
        assert!(con1(&ctx((0, 1), (0.5, 0.5), 2.5, 5), &CON));
        assert!(!con1(&ctx((0, 1), (0.5, 0.5), 2.5, 9), &CON));
        assert!(!con1(&ctx((0, 1), (0.5, 0.5), 1.5, 5), &CON));
    }

    #[test]
    fn con2_examples() {
        assert!(con2(&ctx((1, 0), (0.5, 0.5), 0.2, 4), &CON));
        assert!(!con2(&ctx((1, 0), (0.5, 0.5), 1.0, 4), &CON));
        assert!(!con2(&ctx((1, 0), (0.5, 0.5), 0.2, 2), &CON));
    }

    #[test]
    fn control_examples() {
        let d = control_v(&ctx((0, 1), (0.10, 0.95), 1.2, 1), &COH, &CON);
        assert_eq!(d.v, Control::Up);
        assert_eq!(d.fired, [Predicate::Coh1].into_iter().collect());
        let d = control_v(&ctx((1, 0), (0.95, 0.10), 0.3, 1), &COH, &CON);
        assert_eq!(d.v, Control::Down);
        assert_eq!(d.fired, [Predicate::Coh2].into_iter().collect());
        let d = control_v(&ctx((1, 1), (0.5, 0.5), 1.0, 3), &COH, &CON);
        assert_eq!(d.v, Control::Hold);
        assert!(d.fired.is_empty());
        assert_eq!(d.fired.to_string(), "");
    }

    #[test]
    fn without_performance_only_coherence_fires() {
        let det = Detector {
            coherence: COH,
            continuity: CON,
            performance: false,
        };
        // T below h, yet coherence fires once T clauses are waived.
        assert_eq!(det.decide(&ctx((0, 1), (0.10, 0.95), 0.0, 1)).v, Control::Up);
        // A continuity-only pair no longer fires.
        assert_eq!(det.decide(&ctx((0, 1), (0.5, 0.5), 2.5, 5)).v, Control::Hold);
    }

    #[test]
    fn validation() {
        assert!(COH.validate().is_ok());
        assert!(CON.validate().is_ok());
        assert!(CoherenceParams { alpha: 0.0, ..COH }.validate().is_err());
        assert!(CoherenceParams { lower: 3.0, ..COH }.validate().is_err());
        assert!(ContinuityParams { min_gap: 7, ..CON }.validate().is_err());
        assert!(ContinuityParams { poor: 2.0, ..CON }.validate().is_err());
    }

    fn arb_ctx() -> impl Strategy<Value = PairContext> {
        (any::<bool>(), any::<bool>(), 0.0..1.0f64, 0.0..1.0f64, 0.0..3.0f64, 1u32..12).prop_map(
            |(a, b, d1, d2, t, gap)| PairContext {
                early_state: a,
                late_state: b,
                early_difficulty: d1,
                late_difficulty: d2,
                performance: t,
                gap,
            },
        )
    }

    proptest! {
        #[test]
        fn branches_never_cofire(c in arb_ctx(), perf in any::<bool>()) {
            let det = Detector { coherence: COH, continuity: CON, performance: perf };
            let d = det.decide(&c);
            let up = d.fired.contains(Predicate::Coh1) || d.fired.contains(Predicate::Con1);
            let down = d.fired.contains(Predicate::Coh2) || d.fired.contains(Predicate::Con2);
            prop_assert!(!(up && down));
            match d.v {
                Control::Up => prop_assert!(!c.early_state && c.late_state),
                Control::Down => prop_assert!(c.early_state && !c.late_state),
                Control::Hold => prop_assert!(d.fired.is_empty()),
            }
            prop_assert_eq!(d, det.decide(&c));
        }

        #[test]
        fn crossing_a_threshold_only_moves_performance_clauses(c in arb_ctx(), eps in 1e-9..1e-3f64) {
            for t in [COH.lower, COH.upper, CON.excellent, CON.poor] {
                let below = control_v(&PairContext { performance: t - eps, ..c }, &COH, &CON);
                let above = control_v(&PairContext { performance: t + eps, ..c }, &COH, &CON);
                // State and difficulty clauses are unchanged, so only predicates
                // whose T clause sits at this threshold may differ.
                for p in Predicate::ALL {
                    if below.fired.contains(p) != above.fired.contains(p) {
                        let at = match p {
                            Predicate::Coh1 => COH.lower,
                            Predicate::Coh2 => COH.upper,
                            Predicate::Con1 => CON.excellent,
                            Predicate::Con2 => CON.poor,
                        };
                        prop_assert_eq!(at, t);
                    }
                }
            }
        }
    }
}
