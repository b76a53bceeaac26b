//! Numerical checks of the monotone / hysteretic structure of policies and
//! the submodularity properties of value functions and Q-factors, plus
//! extraction of the queue-threshold representation of a monotone policy.
//!
//! Failures are data: every checker returns a [`StructureReport`] listing
//! all violations. Floating point comparisons use a relative tolerance
//! scaled by the magnitude of the compared values; policy checks are exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{StateSpace, SysState};
use crate::scalar::Scalar;
use crate::solver::{Policy, QFactor, ValueFunction};

pub const DEFAULT_RELATIVE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub state: SysState,
    pub action: Option<usize>,
    pub detail: String,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub property: String,
    pub passed: bool,
    pub tolerance: f64,
    pub checked: usize,
    pub violations: Vec<Violation>,
}

impl StructureReport {
    fn new(property: &str, tolerance: f64, checked: usize, violations: Vec<Violation>) -> Self {
        Self {
            property: property.into(),
            passed: violations.is_empty(),
            tolerance,
            checked,
            violations,
        }
    }

    /// Largest violation magnitude, zero when passing.
    pub fn worst(&self) -> f64 {
        self.violations
            .iter()
            .map(|v| v.magnitude)
            .fold(0.0, f64::max)
    }

    /// Folds another report of the same property into this one.
    pub fn absorb(&mut self, other: StructureReport) {
        self.checked += other.checked;
        self.violations.extend(other.violations);
        self.passed = self.violations.is_empty();
    }
}

/// `lhs <= rhs` up to `rel_tol` times the largest magnitude involved.
/// Returns the excess when violated.
#[inline]
fn excess<T: Scalar>(lhs: T, rhs: T, terms: &[T], rel_tol: f64) -> Option<f64> {
    let scale = terms.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()));
    let diff = (lhs - rhs).to_f64_lossy();
    let allowed = rel_tol * scale.to_f64_lossy();
    if diff > allowed {
        Some(diff)
    } else {
        None
    }
}

/// Action non-decreasing in queue length along every (phase, active) slice.
pub fn check_monotone(policy: &Policy) -> StructureReport {
    let space = *policy.space();
    let mut violations = Vec::new();
    let mut checked = 0;
    for phase in 0..space.n_phases {
        for active in 0..=space.n_servers {
            for queue in 1..=space.buffer {
                checked += 1;
                let prev = policy.action(SysState::new(phase, queue - 1, active));
                let here = policy.action(SysState::new(phase, queue, active));
                if here < prev {
                    violations.push(Violation {
                        state: SysState::new(phase, queue, active),
                        action: Some(here),
                        detail: format!(
                            "action drops {prev} -> {here} from Q={} to Q={queue}",
                            queue - 1
                        ),
                        magnitude: (prev - here) as f64,
                    });
                }
            }
        }
    }
    StructureReport::new("monotone", 0.0, checked, violations)
}

/// The chosen mode is kept once occupied: `f(S,Q,W) = a` implies `f(S,Q,a) = a`.
pub fn check_hysteretic(policy: &Policy) -> StructureReport {
    let space = *policy.space();
    let mut violations = Vec::new();
    for s in space.iter() {
        let a = policy.action(s);
        let again = policy.action(SysState::new(s.phase, s.queue, a));
        if again != a {
            violations.push(Violation {
                state: s,
                action: Some(a),
                detail: format!("moves to {a}, but from W={a} moves on to {again}"),
                magnitude: again.abs_diff(a) as f64,
            });
        }
    }
    StructureReport::new("hysteretic", 0.0, space.len(), violations)
}

/// Submodularity of `u(S, Q, W, a)` in `(Q, a)` for every fixed `(S, W)`,
/// via adjacent cross-differences (sufficient by telescoping).
pub fn check_partial_submodular<T: Scalar>(q: &QFactor<T>, rel_tol: f64) -> StructureReport {
    let space = *q.space();
    let mut violations = Vec::new();
    let mut checked = 0;
    for phase in 0..space.n_phases {
        for active in 0..=space.n_servers {
            for queue in 0..space.buffer {
                let lo = SysState::new(phase, queue, active);
                let hi = SysState::new(phase, queue + 1, active);
                for a in 0..space.n_servers {
                    checked += 1;
                    let (u00, u01) = (q.get(lo, a), q.get(lo, a + 1));
                    let (u10, u11) = (q.get(hi, a), q.get(hi, a + 1));
                    if let Some(m) = excess(u11 - u01, u10 - u00, &[u00, u01, u10, u11], rel_tol) {
                        violations.push(Violation {
                            state: lo,
                            action: Some(a),
                            detail: format!(
                                "u(Q+1,a+1)-u(Q,a+1) exceeds u(Q+1,a)-u(Q,a) at Q={queue}, a={a}"
                            ),
                            magnitude: m,
                        });
                    }
                }
            }
        }
    }
    StructureReport::new("partial_submodular", rel_tol, checked, violations)
}

/// The two value-difference properties behind monotone optimal policies, checked for every
/// value function in `seq` (typically `V_1 .. V_T`):
///
/// * submodularity: `V(S,Q+1,W) - V(S,Q,W) >= V(S,Q+1,W+1) - V(S,Q,W+1)` (submodular in (Q, W));
/// * increment ordering: `0 <= V'(S,Q,0) <= V'(S,Q+1,M)` with `V'(S,Q,W) = V(S,Q+1,W) - V(S,Q,W)`.
pub fn check_value_difference_props<T: Scalar>(
    seq: &[ValueFunction<T>],
    rel_tol: f64,
) -> StructureReport {
    let mut violations = Vec::new();
    let mut checked = 0;
    for (t, v) in seq.iter().enumerate() {
        let space = *v.space();
        let m = space.n_servers;
        let at = |p, q, w| v.get(SysState::new(p, q, w));
        for phase in 0..space.n_phases {
            for queue in 0..space.buffer {
                for w in 0..m {
                    checked += 1;
                    let (v00, v01) = (at(phase, queue, w), at(phase, queue, w + 1));
                    let (v10, v11) = (at(phase, queue + 1, w), at(phase, queue + 1, w + 1));
                    if let Some(mag) = excess(v11 - v01, v10 - v00, &[v00, v01, v10, v11], rel_tol)
                    {
                        violations.push(Violation {
                            state: SysState::new(phase, queue, w),
                            action: None,
                            detail: format!("submodularity in (Q, W) fails at t={}", t + 1),
                            magnitude: mag,
                        });
                    }
                }
                checked += 1;
                let (v0, v1) = (at(phase, queue, 0), at(phase, queue + 1, 0));
                if let Some(mag) = excess(T::zero(), v1 - v0, &[v0, v1], rel_tol) {
                    violations.push(Violation {
                        state: SysState::new(phase, queue, 0),
                        action: None,
                        detail: format!("increment ordering: V'(S,Q,0) < 0 at t={}", t + 1),
                        magnitude: mag,
                    });
                }
                if queue + 2 <= space.buffer {
                    checked += 1;
                    let (w1, w2) = (at(phase, queue + 1, m), at(phase, queue + 2, m));
                    if let Some(mag) = excess(v1 - v0, w2 - w1, &[v0, v1, w1, w2], rel_tol) {
                        violations.push(Violation {
                            state: SysState::new(phase, queue, 0),
                            action: None,
                            detail: format!("increment ordering: V'(S,Q,0) > V'(S,Q+1,M) at t={}", t + 1),
                            magnitude: mag,
                        });
                    }
                }
            }
        }
    }
    StructureReport::new("value_difference", rel_tol, checked, violations)
}

/// Lattice coordinate of a value function or Q-factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinate {
    Phase,
    Queue,
    Active,
    Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmodularityViolation {
    pub pair: (Coordinate, Coordinate),
    /// Lower corner of the offending unit square.
    pub state: SysState,
    pub action: Option<usize>,
    /// Positive cross-difference `f(x+e_i+e_j) - f(x+e_i) - f(x+e_j) + f(x)`.
    pub cross_difference: f64,
}

/// Data scanned by [`search_full_submodularity_violation`].
#[derive(Debug, Clone, Copy)]
pub enum LatticeFunction<'a, T> {
    Value(&'a ValueFunction<T>),
    QFactor(&'a QFactor<T>),
}

impl<T: Scalar> LatticeFunction<'_, T> {
    fn space(&self) -> StateSpace {
        match self {
            LatticeFunction::Value(v) => *v.space(),
            LatticeFunction::QFactor(q) => *q.space(),
        }
    }

    fn coordinates(&self) -> &'static [Coordinate] {
        match self {
            LatticeFunction::Value(_) => {
                &[Coordinate::Phase, Coordinate::Queue, Coordinate::Active]
            }
            LatticeFunction::QFactor(_) => &[
                Coordinate::Phase,
                Coordinate::Queue,
                Coordinate::Active,
                Coordinate::Action,
            ],
        }
    }

    fn at(&self, p: [usize; 4]) -> T {
        let s = SysState::new(p[0], p[1], p[2]);
        match self {
            LatticeFunction::Value(v) => v.get(s),
            LatticeFunction::QFactor(q) => q.get(s, p[3]),
        }
    }
}

fn coordinate_slot(c: Coordinate) -> usize {
    match c {
        Coordinate::Phase => 0,
        Coordinate::Queue => 1,
        Coordinate::Active => 2,
        Coordinate::Action => 3,
    }
}

/// Scans every coordinate pair (phases ordered by index) for a positive
/// cross-difference and returns the largest one beyond tolerance, if any.
pub fn search_full_submodularity_violation<T: Scalar>(
    f: LatticeFunction<'_, T>,
    rel_tol: f64,
) -> Option<SubmodularityViolation> {
    let space = f.space();
    let upper = [
        space.n_phases - 1,
        space.buffer,
        space.n_servers,
        match f {
            LatticeFunction::Value(_) => 0,
            LatticeFunction::QFactor(_) => space.n_servers,
        },
    ];
    let coords = f.coordinates();
    let mut best: Option<SubmodularityViolation> = None;
    for (ci, &c1) in coords.iter().enumerate() {
        for &c2 in &coords[ci + 1..] {
            let (i, j) = (coordinate_slot(c1), coordinate_slot(c2));
            let mut p = [0usize; 4];
            loop {
                if p[i] < upper[i] && p[j] < upper[j] {
                    let mut pi = p;
                    pi[i] += 1;
                    let mut pj = p;
                    pj[j] += 1;
                    let mut pij = pi;
                    pij[j] += 1;
                    let (f0, fi, fj, fij) = (f.at(p), f.at(pi), f.at(pj), f.at(pij));
                    if let Some(cross) = excess(fij - fi, fj - f0, &[f0, fi, fj, fij], rel_tol) {
                        if best.as_ref().is_none_or(|b| cross > b.cross_difference) {
                            best = Some(SubmodularityViolation {
                                pair: (c1, c2),
                                state: SysState::new(p[0], p[1], p[2]),
                                action: matches!(f, LatticeFunction::QFactor(_)).then_some(p[3]),
                                cross_difference: cross,
                            });
                        }
                    }
                }
                // odometer over the full lattice
                let mut k = 0;
                while k < 4 {
                    if p[k] < upper[k] {
                        p[k] += 1;
                        break;
                    }
                    p[k] = 0;
                    k += 1;
                }
                if k == 4 {
                    break;
                }
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StructureError {
    #[error("policy is not monotone in the queue length ({violations} violation(s)); thresholds are undefined")]
    NotMonotone { violations: usize },
}

/// Thresholds of one (phase, active) slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceThresholds {
    pub phase: usize,
    pub active: usize,
    /// `turn_on[k-1] = min { Q : f(S,Q,W) >= W + k }`, for `k = 1 ..= M - W`.
    pub turn_on: Vec<Option<usize>>,
    /// `turn_off[k-1] = max { Q : f(S,Q,W) <= W - k }`, for `k = 1 ..= W`.
    pub turn_off: Vec<Option<usize>>,
    /// Step profile: `(first Q, action)` for each maximal run of equal actions.
    pub steps: Vec<(usize, usize)>,
}

impl SliceThresholds {
    /// Least queue length at which servers are added.
    pub fn first_turn_on(&self) -> Option<usize> {
        self.turn_on.first().copied().flatten()
    }

    /// Greatest queue length at which servers are removed.
    pub fn first_turn_off(&self) -> Option<usize> {
        self.turn_off.first().copied().flatten()
    }

    /// Action at `queue` according to the step profile.
    pub fn step_action(&self, queue: usize) -> usize {
        let idx = self.steps.partition_point(|&(q, _)| q <= queue);
        self.steps[idx - 1].1
    }

    /// Action at `queue` implied by the threshold families alone.
    pub fn threshold_action(&self, queue: usize) -> usize {
        let up = self
            .turn_on
            .iter()
            .filter(|t| t.is_some_and(|q| queue >= q))
            .count();
        let down = self
            .turn_off
            .iter()
            .filter(|t| t.is_some_and(|q| queue <= q))
            .count();
        self.active + up - down
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub space: StateSpace,
    /// Indexed by `phase * (M + 1) + active`.
    pub slices: Vec<SliceThresholds>,
}

impl ThresholdTable {
    pub fn slice(&self, phase: usize, active: usize) -> &SliceThresholds {
        &self.slices[phase * (self.space.n_servers + 1) + active]
    }

    pub fn turn_on(&self, phase: usize, active: usize) -> Option<usize> {
        self.slice(phase, active).first_turn_on()
    }

    pub fn turn_off(&self, phase: usize, active: usize) -> Option<usize> {
        self.slice(phase, active).first_turn_off()
    }

    /// Policy defined by the threshold families.
    pub fn to_policy(&self) -> Policy {
        Policy::from_fn(self.space, |s| {
            self.slice(s.phase, s.active).threshold_action(s.queue)
        })
    }
}

/// Threshold representation of a monotone policy.
pub fn extract_thresholds(policy: &Policy) -> Result<ThresholdTable, StructureError> {
    let report = check_monotone(policy);
    if !report.passed {
        return Err(StructureError::NotMonotone {
            violations: report.violations.len(),
        });
    }
    let space = *policy.space();
    let m = space.n_servers;
    let mut slices = Vec::with_capacity(space.n_phases * (m + 1));
    for phase in 0..space.n_phases {
        for active in 0..=m {
            let profile: Vec<usize> = (0..=space.buffer)
                .map(|q| policy.action(SysState::new(phase, q, active)))
                .collect();
            let turn_on = (1..=m - active)
                .map(|k| profile.iter().position(|&a| a >= active + k))
                .collect();
            let turn_off = (1..=active)
                .map(|k| profile.iter().rposition(|&a| a + k <= active))
                .collect();
            let mut steps: Vec<(usize, usize)> = Vec::new();
            for (q, &a) in profile.iter().enumerate() {
                if steps.last().is_none_or(|&(_, last)| last != a) {
                    steps.push((q, a));
                }
            }
            slices.push(SliceThresholds {
                phase,
                active,
                turn_on,
                turn_off,
                steps,
            });
        }
    }
    Ok(ThresholdTable { space, slices })
}
