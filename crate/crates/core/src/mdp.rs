//! Finite state space, stage costs and the sparse slotted transition kernel.
//!
//! States are ordered phase-major, then queue length, then active-server
//! count: `index = (phase * (B + 1) + queue) * (M + 1) + active`.
//!
//! The successor distribution of `(S, Q, W)` under action `a` does not depend
//! on `W`: it is determined by the post-decision triple `(S, Q, a)`. The kernel
//! therefore stores one row per post-decision triple, indexed exactly like the
//! state `(S, Q, a)`, and every `(state, action)` pair maps onto one of them.

use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::model::{MmppModel, ModelError, SystemParams};
use crate::scalar::Scalar;

/// Serialized with a 1-based phase, like its `Display` form and the output tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "ExternalState", try_from = "ExternalState")]
pub struct SysState {
    /// Arrival phase, 0-based.
    pub phase: usize,
    pub queue: usize,
    pub active: usize,
}

impl SysState {
    pub const fn new(phase: usize, queue: usize, active: usize) -> Self {
        Self {
            phase,
            queue,
            active,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExternalState {
    phase: usize,
    queue: usize,
    active: usize,
}

impl From<SysState> for ExternalState {
    fn from(s: SysState) -> Self {
        ExternalState {
            phase: s.phase + 1,
            queue: s.queue,
            active: s.active,
        }
    }
}

impl TryFrom<ExternalState> for SysState {
    type Error = String;

    fn try_from(e: ExternalState) -> Result<Self, String> {
        if e.phase == 0 {
            return Err("phase is 1-based".into());
        }
        Ok(SysState::new(e.phase - 1, e.queue, e.active))
    }
}

impl fmt::Display for SysState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // phases are shown 1-based
        write!(
            f,
            "(S={}, Q={}, W={})",
            self.phase + 1,
            self.queue,
            self.active
        )
    }
}

/// Number of servers to keep active during the next slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateSpace {
    pub n_phases: usize,
    pub buffer: usize,
    pub n_servers: usize,
}

impl StateSpace {
    pub fn new(n_phases: usize, buffer: usize, n_servers: usize) -> Self {
        Self {
            n_phases,
            buffer,
            n_servers,
        }
    }

    pub fn of<T>(model: &MmppModel<T>, params: &SystemParams<T>) -> Self {
        Self::new(model.arrival_rates.len(), params.buffer, params.n_servers)
    }

    pub fn len(&self) -> usize {
        self.n_phases * (self.buffer + 1) * (self.n_servers + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_actions(&self) -> usize {
        self.n_servers + 1
    }

    #[inline]
    pub fn index(&self, s: SysState) -> usize {
        debug_assert!(self.contains(s), "state {s} outside {self:?}");
        (s.phase * (self.buffer + 1) + s.queue) * (self.n_servers + 1) + s.active
    }

    #[inline]
    pub fn state(&self, index: usize) -> SysState {
        let per_phase = (self.buffer + 1) * (self.n_servers + 1);
        let phase = index / per_phase;
        let rem = index % per_phase;
        SysState::new(
            phase,
            rem / (self.n_servers + 1),
            rem % (self.n_servers + 1),
        )
    }

    pub fn contains(&self, s: SysState) -> bool {
        s.phase < self.n_phases && s.queue <= self.buffer && s.active <= self.n_servers
    }

    /// Index of the post-decision triple `(S, Q, a)` reached from `s` under `action`.
    #[inline]
    pub fn post_index(&self, s: SysState, action: usize) -> usize {
        self.index(SysState::new(s.phase, s.queue, action))
    }

    pub fn iter(&self) -> impl Iterator<Item = SysState> + '_ {
        (0..self.len()).map(move |i| self.state(i))
    }
}

/// All states in index order.
pub fn enumerate_states(space: &StateSpace) -> Vec<SysState> {
    space.iter().collect()
}

/// Switching part of the stage cost: only turn-ons are charged.
#[inline]
pub fn switching_cost<T: Scalar>(e_switch: T, active: usize, action: usize) -> T {
    if action > active {
        T::of_usize(action - active) * e_switch
    } else {
        T::zero()
    }
}

/// Cost charged in the slot where `action` is taken from `state`.
pub fn stage_cost<T: Scalar>(state: SysState, action: Action, params: &SystemParams<T>) -> T {
    switching_cost(params.e_switch, state.active, action.0)
        + params.delay_weight * T::of_usize(state.queue)
        + T::of_usize(action.0) * params.e_on
}

/// One-slot successor distribution. Branches with zero probability are
/// omitted; order is arrival, departure, phase shifts by ascending target
/// phase, self-loop.
pub fn transition_distribution<T: Scalar>(
    state: SysState,
    action: Action,
    model: &MmppModel<T>,
    params: &SystemParams<T>,
    slot: T,
) -> Result<Vec<(SysState, T)>, ModelError> {
    let SysState { phase, queue, .. } = state;
    let a = action.0;
    let mut out = Vec::with_capacity(model.n_phases() + 2);
    let mut moved = T::zero();
    let push = |succ: SysState, p: T, out: &mut Vec<(SysState, T)>| -> Result<(), ModelError> {
        if !(p >= T::zero() && p <= T::one()) {
            return Err(ModelError::InvalidSlot {
                state,
                action: a,
                value: p.to_f64_lossy(),
            });
        }
        if p > T::zero() {
            out.push((succ, p));
        }
        Ok(())
    };
    if queue < params.buffer {
        let p = model.arrival_rates[phase] * slot;
        moved += p;
        push(SysState::new(phase, queue + 1, a), p, &mut out)?;
    }
    if queue > 0 {
        let p = T::of_usize(a) * params.service_rate * slot;
        moved += p;
        push(SysState::new(phase, queue - 1, a), p, &mut out)?;
    }
    for other in 0..model.n_phases() {
        if other == phase {
            continue;
        }
        let p = model.rate(phase, other) * slot;
        moved += p;
        push(SysState::new(other, queue, a), p, &mut out)?;
    }
    let mut stay = T::one() - moved;
    // a slot exactly on the one-event bound can leave a rounding-level negative
    let slack = T::epsilon() * T::of_usize(model.n_phases() + 2);
    if stay < T::zero() && stay >= -slack {
        stay = T::zero();
    }
    push(SysState::new(phase, queue, a), stay, &mut out)?;
    Ok(out)
}

/// Sparse kernel with one row per post-decision triple `(S, Q, a)`.
#[derive(Debug, Clone)]
pub struct TransitionKernel<T> {
    space: StateSpace,
    offsets: Vec<usize>,
    successors: Vec<u32>,
    probs: Vec<T>,
    slot: T,
}

impl<T: Scalar> TransitionKernel<T> {
    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn slot(&self) -> T {
        self.slot
    }

    /// Successor indices and probabilities of post-decision row `post`.
    #[inline]
    pub fn post_row(&self, post: usize) -> (&[u32], &[T]) {
        let (lo, hi) = (self.offsets[post], self.offsets[post + 1]);
        (&self.successors[lo..hi], &self.probs[lo..hi])
    }

    /// Successor distribution of `(state, action)`.
    pub fn row(&self, state: SysState, action: Action) -> impl Iterator<Item = (SysState, T)> + '_ {
        let (succ, probs) = self.post_row(self.space.post_index(state, action.0));
        succ.iter()
            .zip(probs)
            .map(move |(&j, &p)| (self.space.state(j as usize), p))
    }

    /// `sum_j P(j | post) * values[j]`.
    #[inline]
    pub fn expect(&self, post: usize, values: &[T]) -> T {
        let (succ, probs) = self.post_row(post);
        let mut acc = T::zero();
        for (&j, &p) in succ.iter().zip(probs) {
            acc += p * values[j as usize];
        }
        acc
    }

    pub fn n_entries(&self) -> usize {
        self.successors.len()
    }

    /// Longest row, in entries.
    pub fn max_row_len(&self) -> usize {
        self.offsets
            .windows(2)
            .map(|w| w[1] - w[0])
            .max()
            .unwrap_or(0)
    }

    /// Diagnostic dump: one line per (state, action) with `succ_index:prob` pairs.
    pub fn write_dump<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "state_index,phase,queue,active,action,successors")?;
        for i in 0..self.space.len() {
            let s = self.space.state(i);
            for a in 0..self.space.n_actions() {
                let (succ, probs) = self.post_row(self.space.post_index(s, a));
                let pairs: Vec<String> = succ
                    .iter()
                    .zip(probs)
                    .map(|(j, p)| format!("{j}:{p}"))
                    .collect();
                writeln!(
                    out,
                    "{i},{},{},{},{a},{}",
                    s.phase + 1,
                    s.queue,
                    s.active,
                    pairs.join(";")
                )?;
            }
        }
        Ok(())
    }
}

/// Stage cost tables: switching weight plus the post-decision holding and
/// running part `omega * Q + a * E_on`.
#[derive(Debug, Clone)]
pub struct StageCosts<T> {
    space: StateSpace,
    pub e_switch: T,
    holding: Vec<T>,
}

impl<T: Scalar> StageCosts<T> {
    pub fn new(space: StateSpace, params: &SystemParams<T>) -> Self {
        let holding = space
            .iter()
            .map(|s| {
                params.delay_weight * T::of_usize(s.queue) + T::of_usize(s.active) * params.e_on
            })
            .collect();
        Self {
            space,
            e_switch: params.e_switch,
            holding,
        }
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    #[inline]
    pub fn switching(&self, active: usize, action: usize) -> T {
        switching_cost(self.e_switch, active, action)
    }

    /// `omega * Q + a * E_on` for post-decision row `post`.
    #[inline]
    pub fn holding(&self, post: usize) -> T {
        self.holding[post]
    }

    pub fn cost(&self, state: SysState, action: Action) -> T {
        self.switching(state.active, action.0)
            + self.holding[self.space.post_index(state, action.0)]
    }
}

/// A materialized instance: kernel plus stage costs.
#[derive(Debug, Clone)]
pub struct SleepMdp<T> {
    pub kernel: TransitionKernel<T>,
    pub costs: StageCosts<T>,
}

impl<T: Scalar> SleepMdp<T> {
    pub fn space(&self) -> &StateSpace {
        self.kernel.space()
    }
}

/// Builds the kernel and cost tables for `slot`. Does not re-validate the
/// parameters beyond the probability check, so degenerate instances (B = 0,
/// M = 0) can be built for testing.
pub fn build_kernel<T: Scalar>(
    model: &MmppModel<T>,
    params: &SystemParams<T>,
    slot: T,
) -> Result<SleepMdp<T>, ModelError> {
    let space = StateSpace::of(model, params);
    assert!(
        space.len() <= u32::MAX as usize,
        "state space too large for u32 successor indices"
    );
    let mut offsets = Vec::with_capacity(space.len() + 1);
    let mut successors = Vec::with_capacity(space.len() * (model.n_phases() + 2));
    let mut probs = Vec::with_capacity(space.len() * (model.n_phases() + 2));
    offsets.push(0);
    for post in 0..space.len() {
        let p = space.state(post);
        let row = transition_distribution(p, Action(p.active), model, params, slot)?;
        for (succ, prob) in row {
            successors.push(space.index(succ) as u32);
            probs.push(prob);
        }
        offsets.push(successors.len());
    }
    Ok(SleepMdp {
        kernel: TransitionKernel {
            space,
            offsets,
            successors,
            probs,
            slot,
        },
        costs: StageCosts::new(space, params),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{reference_instance, Discount, SlotSpec};

    fn tiny() -> (MmppModel<f64>, SystemParams<f64>) {
        let model = MmppModel::poisson(1.0);
        let params = SystemParams {
            n_servers: 1,
            service_rate: 2.0,
            buffer: 1,
            e_switch: 1.0,
            e_on: 0.1,
            delay_weight: 0.5,
            discount: Discount::PerSlot(0.9),
            slot: SlotSpec::Fixed(0.1),
        };
        (model, params)
    }

    #[test]
    fn slot_on_the_bound_builds() {
        // 1 - (0.1 + 0.4 + 0.1) / 0.6 rounds to -2.2e-16
        let model = MmppModel::new(vec![0.1, 0.1], vec![vec![0.0, 0.1], vec![0.1, 0.0]]);
        let params = SystemParams {
            n_servers: 2,
            service_rate: 0.2,
            buffer: 3,
            e_switch: 1.0,
            e_on: 0.1,
            delay_weight: 0.5,
            discount: Discount::PerSlot(0.9),
            slot: SlotSpec::Auto { safety: 1.0 },
        };
        let slot = crate::model::choose_slot_duration(&model, &params).unwrap();
        let mdp = build_kernel(&model, &params, slot).unwrap();
        let s = SysState::new(0, 1, 0);
        let row: Vec<_> = mdp.kernel.row(s, Action(2)).collect();
        assert!(row
            .iter()
            .all(|&(next, p)| p > 0.0 && next != SysState::new(0, 1, 2)));
    }

    #[test]
    fn state_counts() {
        assert_eq!(enumerate_states(&StateSpace::new(2, 1, 1)).len(), 8);
        assert_eq!(StateSpace::new(2, 250, 15).len(), 8032);
        assert_eq!(enumerate_states(&StateSpace::new(1, 0, 0)).len(), 1);
    }

    #[test]
    fn indexing_is_bijective_and_phase_major() {
        let space = StateSpace::new(3, 4, 2);
        let states = enumerate_states(&space);
        for (i, s) in states.iter().enumerate() {
            assert_eq!(space.index(*s), i);
        }
        let mut sorted = states.clone();
        sorted.sort();
        assert_eq!(sorted, states);
    }

    #[test]
    fn stage_cost_values() {
        let (_, p) = reference_instance::<f64>();
        assert_eq!(stage_cost(SysState::new(0, 5, 2), Action(3), &p), 208.5);
        assert_eq!(stage_cost(SysState::new(1, 0, 0), Action(0), &p), 0.0);
        assert_eq!(stage_cost(SysState::new(0, 5, 3), Action(1), &p), 3.5);
    }

    #[test]
    fn transition_example_with_ten_ms_slot() {
        let (m, p) = reference_instance::<f64>();
        let row = transition_distribution(SysState::new(0, 5, 2), Action(2), &m, &p, 0.01).unwrap();
        let expect = [
            (SysState::new(0, 6, 2), 0.05),
            (SysState::new(0, 4, 2), 2.0 / 0.12 * 0.01),
            (SysState::new(1, 5, 2), 0.005),
            (
                SysState::new(0, 5, 2),
                1.0 - 0.05 - 2.0 / 0.12 * 0.01 - 0.005,
            ),
        ];
        assert_eq!(row.len(), 4);
        for ((s, p), (es, ep)) in row.iter().zip(expect) {
            assert_eq!(*s, es);
            assert!((p - ep).abs() < 1e-15);
        }
        assert!((row[1].1 - 0.16667).abs() < 1e-5);
        assert!((row[3].1 - 0.77833).abs() < 1e-5);
    }

    #[test]
    fn full_buffer_blocks_arrivals() {
        let (m, p) = reference_instance::<f64>();
        let row =
            transition_distribution(SysState::new(0, 250, 4), Action(4), &m, &p, 0.005).unwrap();
        assert!(row.iter().all(|(s, _)| s.queue <= 250));
        assert!(!row.iter().any(|(s, _)| s.queue == 251));
        assert_eq!(row.len(), 3);
    }

    #[test]
    fn empty_off_phase_only_shifts_or_stays() {
        let (m, p) = reference_instance::<f64>();
        let row =
            transition_distribution(SysState::new(1, 0, 0), Action(3), &m, &p, 0.005).unwrap();
        assert_eq!(
            row.iter().map(|(s, _)| *s).collect::<Vec<_>>(),
            vec![SysState::new(0, 0, 3), SysState::new(1, 0, 3)]
        );
    }

    #[test]
    fn oversized_slot_is_invalid() {
        let (m, p) = reference_instance::<f64>();
        let err =
            transition_distribution(SysState::new(0, 5, 0), Action(15), &m, &p, 0.01).unwrap_err();
        assert!(matches!(err, ModelError::InvalidSlot { action: 15, .. }));
        assert!(build_kernel(&m, &p, 0.01).is_err());
    }

    #[test]
    fn tiny_kernel_rows_are_stochastic() {
        let (m, p) = tiny();
        let mdp = build_kernel(&m, &p, 0.1).unwrap();
        assert_eq!(mdp.space().len(), 4);
        for s in mdp.space().iter() {
            for a in 0..2 {
                let row: Vec<_> = mdp.kernel.row(s, Action(a)).collect();
                let total: f64 = row.iter().map(|(_, p)| p).sum();
                assert!((total - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|(succ, _)| succ.active == a));
                assert_eq!(mdp.costs.cost(s, Action(a)), stage_cost(s, Action(a), &p));
            }
        }
    }

    #[test]
    fn reference_kernel_shape() {
        let (m, p) = reference_instance::<f64>();
        let dt = crate::model::choose_slot_duration(&m, &p).unwrap();
        let mdp = build_kernel(&m, &p, dt).unwrap();
        assert_eq!(mdp.space().len(), 8032);
        assert_eq!(mdp.space().n_actions(), 16);
        // arrival, departure, one phase neighbor, self-loop
        assert!(mdp.kernel.max_row_len() <= 4);
    }

    #[test]
    fn degenerate_single_state() {
        let m = MmppModel::poisson(0.0);
        let p = SystemParams {
            n_servers: 0,
            buffer: 0,
            ..tiny().1
        };
        let mdp = build_kernel(&m, &p, 0.1).unwrap();
        assert_eq!(mdp.space().len(), 1);
        let row: Vec<_> = mdp.kernel.row(SysState::new(0, 0, 0), Action(0)).collect();
        assert_eq!(row, vec![(SysState::new(0, 0, 0), 1.0)]);
    }

    #[test]
    fn dump_has_one_line_per_pair() {
        let (m, p) = tiny();
        let mdp = build_kernel(&m, &p, 0.1).unwrap();
        let mut buf = Vec::new();
        mdp.kernel.write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 2);
    }
}
