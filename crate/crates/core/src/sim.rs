//! Slotted Monte-Carlo simulation of the controlled queue.
//!
//! The simulator draws exactly one of {arrival, departure, phase shift,
//! nothing} per slot with the same probabilities as the transition kernel,
//! but computes them directly from the model rather than from the kernel.
//! An arrival drawn while the buffer is full is counted as blocked and leaves
//! the state unchanged.
//!
//! Randomness: each replication runs its own ChaCha8 stream seeded with
//! [`replication_seed`]`(master_seed, replication_index)`, so an experiment is
//! reproducible from one integer regardless of how replications are scheduled.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::mdp::{StateSpace, SysState};
use crate::model::{MmppModel, SystemParams};
use crate::scalar::Scalar;
use crate::solver::Policy;
use crate::structure::ThresholdTable;

pub const DEFAULT_TAIL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("bad parameter: {0}")]
    BadParameter(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    /// Wake `servers` servers once the queue reaches `threshold`, keep them
    /// while jobs remain, sleep everything when the queue empties.
    NPolicy {
        threshold: usize,
        servers: usize,
    },
    AlwaysOn,
    AlwaysOff,
    FromThresholds(ThresholdTable),
}

impl FromStr for Baseline {
    type Err = SimError;

    /// `always_on`, `always_off` or `n_policy:N,m`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "always_on" => Ok(Baseline::AlwaysOn),
            "always_off" => Ok(Baseline::AlwaysOff),
            _ => {
                let args = s
                    .strip_prefix("n_policy:")
                    .ok_or_else(|| SimError::BadParameter(format!("unknown baseline '{s}'")))?;
                let parts: Vec<&str> = args.split(',').collect();
                let parse = |x: &str| {
                    x.trim()
                        .parse::<usize>()
                        .map_err(|_| SimError::BadParameter(format!("bad n_policy argument '{x}'")))
                };
                match parts.as_slice() {
                    [n, m] => Ok(Baseline::NPolicy {
                        threshold: parse(n)?,
                        servers: parse(m)?,
                    }),
                    _ => Err(SimError::BadParameter(format!(
                        "n_policy expects 'n_policy:N,m', got '{s}'"
                    ))),
                }
            }
        }
    }
}

pub fn make_baseline_policy(kind: &Baseline, space: StateSpace) -> Result<Policy, SimError> {
    match kind {
        Baseline::AlwaysOn => Ok(Policy::constant(space, space.n_servers)),
        Baseline::AlwaysOff => Ok(Policy::constant(space, 0)),
        Baseline::NPolicy { threshold, servers } => {
            if *threshold > space.buffer {
                return Err(SimError::BadParameter(format!(
                    "n_policy threshold {threshold} exceeds buffer {}",
                    space.buffer
                )));
            }
            if *servers > space.n_servers || *servers == 0 {
                return Err(SimError::BadParameter(format!(
                    "n_policy server count {servers} outside 1..={}",
                    space.n_servers
                )));
            }
            Ok(Policy::from_fn(space, |s| {
                if s.queue >= *threshold || (s.active > 0 && s.queue > 0) {
                    *servers
                } else {
                    0
                }
            }))
        }
        Baseline::FromThresholds(table) => {
            if table.space != space {
                return Err(SimError::BadParameter(
                    "threshold table was extracted on a different state space".into(),
                ));
            }
            Ok(table.to_policy())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Slots(usize),
    /// Smallest T with `r^T <= tolerance`.
    TailTolerance(f64),
}

impl Horizon {
    pub fn slots(&self, r: f64) -> usize {
        match *self {
            Horizon::Slots(t) => t,
            Horizon::TailTolerance(tol) => {
                if r <= 0.0 || tol >= 1.0 {
                    1
                } else {
                    (tol.ln() / r.ln()).ceil().max(1.0) as usize
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub start: SysState,
    pub replications: usize,
    pub horizon: Horizon,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub arrivals: u64,
    pub departures: u64,
    pub blocks: u64,
    pub phase_shifts: u64,
    pub turn_ons: u64,
}

impl EventCounts {
    fn add(&mut self, o: &EventCounts) {
        self.arrivals += o.arrivals;
        self.departures += o.departures;
        self.blocks += o.blocks;
        self.phase_shifts += o.phase_shifts;
        self.turn_ons += o.turn_ons;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    Arrival,
    Departure,
    Blocked,
    PhaseShift,
    Nothing,
}

/// One slot of a trace: state at the start of slot `t`, the action taken,
/// the event drawn and the discounted cost charged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub state: SysState,
    pub action: usize,
    pub event: Event,
    pub discounted_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T> {
    pub cost: T,
    pub counts: EventCounts,
    pub final_state: SysState,
}

/// SplitMix64 finalizer over the master seed and replication index.
pub fn replication_seed(master: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(master) ^ index)
}

struct SlotRates<T> {
    arrival: Vec<T>,
    service: T,
    shift: Vec<Vec<T>>,
}

impl<T: Scalar> SlotRates<T> {
    fn new(model: &MmppModel<T>, params: &SystemParams<T>, slot: T) -> Self {
        let n = model.n_phases();
        Self {
            arrival: model.arrival_rates.iter().map(|&l| l * slot).collect(),
            service: params.service_rate * slot,
            shift: (0..n)
                .map(|i| (0..n).map(|j| model.rate(i, j) * slot).collect())
                .collect(),
        }
    }
}

/// Simulates `slots` slots from `start` and returns the discounted cost
/// `sum_t r^(t-1) * stage_cost`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_episode<T: Scalar>(
    policy: &Policy,
    model: &MmppModel<T>,
    params: &SystemParams<T>,
    slot: T,
    r: T,
    start: SysState,
    slots: usize,
    seed: u64,
) -> Episode<T> {
    run_episode(policy, model, params, slot, r, start, slots, seed, None)
}

/// Like [`simulate_episode`], calling `trace` once per slot.
#[allow(clippy::too_many_arguments)]
pub fn simulate_episode_traced<T: Scalar>(
    policy: &Policy,
    model: &MmppModel<T>,
    params: &SystemParams<T>,
    slot: T,
    r: T,
    start: SysState,
    slots: usize,
    seed: u64,
    trace: &mut dyn FnMut(TraceRow),
) -> Episode<T> {
    run_episode(
        policy,
        model,
        params,
        slot,
        r,
        start,
        slots,
        seed,
        Some(trace),
    )
}

#[allow(clippy::too_many_arguments)]
fn run_episode<T: Scalar>(
    policy: &Policy,
    model: &MmppModel<T>,
    params: &SystemParams<T>,
    slot: T,
    r: T,
    start: SysState,
    slots: usize,
    seed: u64,
    mut trace: Option<&mut dyn FnMut(TraceRow)>,
) -> Episode<T> {
    let space = *policy.space();
    assert!(
        space.contains(start),
        "start state {start} outside the state space"
    );
    let rates = SlotRates::new(model, params, slot);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = start;
    let mut weight = T::one();
    let mut cost = T::zero();
    let mut counts = EventCounts::default();
    for t in 0..slots {
        let a = policy.action(s);
        let stage = crate::mdp::switching_cost(params.e_switch, s.active, a)
            + params.delay_weight * T::of_usize(s.queue)
            + T::of_usize(a) * params.e_on;
        cost += weight * stage;
        if a > s.active {
            counts.turn_ons += (a - s.active) as u64;
        }
        let before = s;
        s.active = a;

        let u = T::of(rng.gen::<f64>());
        let mut edge = rates.arrival[s.phase];
        let event = if u < edge {
            if s.queue < space.buffer {
                s.queue += 1;
                counts.arrivals += 1;
                Event::Arrival
            } else {
                counts.blocks += 1;
                Event::Blocked
            }
        } else {
            if s.queue > 0 {
                edge += T::of_usize(a) * rates.service;
            }
            if u < edge {
                s.queue -= 1;
                counts.departures += 1;
                Event::Departure
            } else {
                let mut event = Event::Nothing;
                for (j, &p) in rates.shift[s.phase].iter().enumerate() {
                    if j == s.phase {
                        continue;
                    }
                    edge += p;
                    if u < edge {
                        s.phase = j;
                        counts.phase_shifts += 1;
                        event = Event::PhaseShift;
                        break;
                    }
                }
                event
            }
        };
        if let Some(f) = trace.as_mut() {
            f(TraceRow {
                t,
                state: before,
                action: a,
                event,
                discounted_cost: (weight * stage).to_f64_lossy(),
            });
        }
        weight *= r;
    }
    Episode {
        cost,
        counts,
        final_state: s,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub start: SysState,
    pub replications: usize,
    pub horizon_slots: usize,
    /// `r^T`, the discount weight of the truncated tail.
    pub tail_weight: f64,
    pub seed: u64,
    pub mean: f64,
    pub std_err: f64,
    pub ci99_low: f64,
    pub ci99_high: f64,
    /// Upper bound on the cost lost by truncating at `horizon_slots`.
    pub truncation_bias_bound: f64,
    pub counts: EventCounts,
    pub costs: Vec<f64>,
}

impl SimReport {
    pub fn ci_width(&self) -> f64 {
        self.ci99_high - self.ci99_low
    }

    /// Whether `value` lies in the 99% interval widened upward by the
    /// truncation bias bound (truncation can only lower the estimate).
    pub fn consistent_with(&self, value: f64) -> bool {
        value >= self.ci99_low && value <= self.ci99_high + self.truncation_bias_bound
    }
}

/// Monte-Carlo estimate of the discounted cost of `policy` from `config.start`.
pub fn estimate_discounted_cost<T: Scalar>(
    policy: &Policy,
    model: &MmppModel<T>,
    params: &SystemParams<T>,
    slot: T,
    r: T,
    config: &SimConfig,
) -> Result<SimReport, SimError> {
    if config.replications < 2 {
        return Err(SimError::BadParameter(format!(
            "need at least 2 replications, got {}",
            config.replications
        )));
    }
    if !policy.space().contains(config.start) {
        return Err(SimError::BadParameter(format!(
            "start state {} outside the state space",
            config.start
        )));
    }
    let r64 = r.to_f64_lossy();
    let horizon = config.horizon.slots(r64);
    let episodes: Vec<Episode<T>> = (0..config.replications)
        .into_par_iter()
        .map(|i| {
            simulate_episode(
                policy,
                model,
                params,
                slot,
                r,
                config.start,
                horizon,
                replication_seed(config.seed, i as u64),
            )
        })
        .collect();
    let costs: Vec<f64> = episodes.iter().map(|e| e.cost.to_f64_lossy()).collect();
    let mut counts = EventCounts::default();
    for e in &episodes {
        counts.add(&e.counts);
    }
    let n = costs.len() as f64;
    let mean = costs.iter().sum::<f64>() / n;
    let var = if costs.iter().all(|&c| c == costs[0]) {
        0.0
    } else {
        costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    let std_err = (var / n).sqrt();
    let quantile = StudentsT::new(0.0, 1.0, n - 1.0)
        .map(|t| t.inverse_cdf(0.995))
        .unwrap_or(f64::INFINITY);
    let half = if std_err > 0.0 {
        quantile * std_err
    } else {
        0.0
    };
    let tail_weight = r64.powi(horizon as i32);
    let truncation_bias_bound = tail_weight * params.max_stage_cost().to_f64_lossy() / (1.0 - r64);
    Ok(SimReport {
        start: config.start,
        replications: config.replications,
        horizon_slots: horizon,
        tail_weight,
        seed: config.seed,
        mean,
        std_err,
        ci99_low: mean - half,
        ci99_high: mean + half,
        truncation_bias_bound,
        counts,
        costs,
    })
}
