//! MMPP arrival model, system parameters and the slotted discretization.
//!
//! Rates are per second and slots are seconds. Phases are indexed from 0 in
//! code; everything user-facing (config files, exported tables, messages)
//! numbers them from 1.

use std::fmt;

use thiserror::Error;

use crate::mdp::SysState;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("negative rate in {field}")]
    NegativeRate { field: String },
    #[error("non-finite value in {field}")]
    NonFinite { field: String },
    #[error("the phase set is empty")]
    EmptyPhaseSet,
    #[error("{field} has shape {found}, expected {expected}")]
    ShapeMismatch {
        field: String,
        expected: String,
        found: String,
    },
    #[error("bad discount {field} = {value}: the per-slot factor must lie in [0, 1)")]
    BadDiscount { field: String, value: f64 },
    #[error("bad buffer size {buffer}: must be at least 1")]
    BadBuffer { buffer: usize },
    #[error("bad server count {servers}: must be at least 1")]
    BadServers { servers: usize },
    #[error("bad service rate {value}: must be positive")]
    BadServiceRate { value: f64 },
    #[error("negative cost weight {field} = {value}")]
    NegativeWeight { field: String, value: f64 },
    #[error("bad slot {field} = {value}")]
    BadSlot { field: String, value: f64 },
    #[error(
        "slot {slot} s is too large: state {worst} under action {action} has total event mass {mass} > 1; \
         maximum admissible slot is {max_slot} s"
    )]
    SlotTooLarge {
        slot: f64,
        max_slot: f64,
        worst: SysState,
        action: usize,
        mass: f64,
    },
    #[error("transition probability {value} out of [0, 1] at state {state}, action {action}")]
    InvalidSlot {
        state: SysState,
        action: usize,
        value: f64,
    },
    #[error("phase chain is reducible: stationary distribution is not unique")]
    ReducibleChain,
}

/// Every violation found by [`validate_model`], in discovery order.
#[derive(Debug, Clone, PartialEq, Error)]
pub struct ValidationErrors(pub Vec<ModelError>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} validation error(s)", self.0.len())?;
        for e in &self.0 {
            write!(f, "; {e}")?;
        }
        Ok(())
    }
}

/// Markov-modulated Poisson arrivals.
///
/// `transition_rates[i][j]` is the phase switching rate from `i` to `j`; the
/// diagonal is ignored and implied by the row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct MmppModel<T> {
    pub arrival_rates: Vec<T>,
    pub transition_rates: Vec<Vec<T>>,
    pub phase_names: Vec<String>,
}

impl<T: Scalar> MmppModel<T> {
    pub fn new(arrival_rates: Vec<T>, transition_rates: Vec<Vec<T>>) -> Self {
        let phase_names = (1..=arrival_rates.len()).map(|i| format!("S{i}")).collect();
        Self {
            arrival_rates,
            transition_rates,
            phase_names,
        }
    }

    /// Plain Poisson arrivals: a single phase.
    pub fn poisson(rate: T) -> Self {
        Self::new(vec![rate], vec![vec![T::zero()]])
    }

    pub fn with_phase_names(mut self, names: Vec<String>) -> Self {
        self.phase_names = names;
        self
    }

    pub fn n_phases(&self) -> usize {
        self.arrival_rates.len()
    }

    pub fn phase_name(&self, phase: usize) -> String {
        self.phase_names
            .get(phase)
            .cloned()
            .unwrap_or_else(|| format!("S{}", phase + 1))
    }

    /// Switching rate from `from` to `to`; zero on the diagonal.
    pub fn rate(&self, from: usize, to: usize) -> T {
        if from == to {
            T::zero()
        } else {
            self.transition_rates[from][to]
        }
    }

    /// Total rate of leaving `phase` (the negated generator diagonal).
    pub fn outflow_rate(&self, phase: usize) -> T {
        (0..self.n_phases()).map(|j| self.rate(phase, j)).sum()
    }

    /// Generator matrix with the implied diagonal filled in.
    pub fn generator(&self) -> Vec<Vec<T>> {
        let n = self.n_phases();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            -self.outflow_rate(i)
                        } else {
                            self.rate(i, j)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn max_arrival_rate(&self) -> T {
        self.arrival_rates
            .iter()
            .fold(T::zero(), |acc, &x| acc.max(x))
    }

    pub fn max_outflow_rate(&self) -> T {
        (0..self.n_phases()).fold(T::zero(), |acc, s| acc.max(self.outflow_rate(s)))
    }

    /// Phase with the smallest arrival rate (the "OFF" phase of an IPP); ties go to the lowest index.
    pub fn quietest_phase(&self) -> usize {
        let mut best = 0;
        for (s, &rate) in self.arrival_rates.iter().enumerate() {
            if rate < self.arrival_rates[best] {
                best = s;
            }
        }
        best
    }
}

/// How the discount is specified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Discount<T> {
    /// Factor applied per slot, used verbatim.
    PerSlot(T),
    /// Continuous discount rate in 1/s, converted as `exp(-rate * slot)`.
    Rate(T),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlotSpec<T> {
    /// Largest slot satisfying the one-event bound, shrunk by `safety` in (0, 1].
    Auto {
        safety: T,
    },
    Fixed(T),
}

pub const DEFAULT_SLOT_SAFETY: f64 = 0.9;

impl<T: Scalar> Default for SlotSpec<T> {
    fn default() -> Self {
        SlotSpec::Auto {
            safety: T::of(DEFAULT_SLOT_SAFETY),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams<T> {
    pub n_servers: usize,
    /// Per active server, jobs/s.
    pub service_rate: T,
    pub buffer: usize,
    /// Joules per server turn-on.
    pub e_switch: T,
    /// Joules per active server per slot.
    pub e_on: T,
    /// Cost per queued job per slot.
    pub delay_weight: T,
    pub discount: Discount<T>,
    pub slot: SlotSpec<T>,
}

impl<T: Scalar> SystemParams<T> {
    /// Upper bound on the stage cost over all states and actions.
    pub fn max_stage_cost(&self) -> T {
        let m = T::of_usize(self.n_servers);
        m * self.e_switch + self.delay_weight * T::of_usize(self.buffer) + m * self.e_on
    }
}

fn check_finite<T: Scalar>(errs: &mut Vec<ModelError>, field: &str, x: T) -> bool {
    if x.is_finite() {
        true
    } else {
        errs.push(ModelError::NonFinite {
            field: field.to_string(),
        });
        false
    }
}

/// Checks every invariant of the model and parameters and reports all violations.
pub fn validate_model<T: Scalar>(
    model: &MmppModel<T>,
    params: &SystemParams<T>,
) -> Result<(), ValidationErrors> {
    let mut errs = Vec::new();
    let n = model.n_phases();
    if n == 0 {
        errs.push(ModelError::EmptyPhaseSet);
    }
    for (s, &rate) in model.arrival_rates.iter().enumerate() {
        let field = format!("arrival rate of phase {}", s + 1);
        if check_finite(&mut errs, &field, rate) && rate < T::zero() {
            errs.push(ModelError::NegativeRate { field });
        }
    }
    if model.transition_rates.len() != n || model.transition_rates.iter().any(|row| row.len() != n)
    {
        errs.push(ModelError::ShapeMismatch {
            field: "transition_rates".into(),
            expected: format!("{n}x{n}"),
            found: format!(
                "{}x[{}]",
                model.transition_rates.len(),
                model
                    .transition_rates
                    .iter()
                    .map(|r| r.len().to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
        });
    } else {
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let field = format!("transition rate from phase {} to phase {}", i + 1, j + 1);
                let rate = model.transition_rates[i][j];
                if check_finite(&mut errs, &field, rate) && rate < T::zero() {
                    errs.push(ModelError::NegativeRate { field });
                }
            }
        }
    }
    if !model.phase_names.is_empty() && model.phase_names.len() != n {
        errs.push(ModelError::ShapeMismatch {
            field: "phase_names".into(),
            expected: n.to_string(),
            found: model.phase_names.len().to_string(),
        });
    }

    if params.n_servers < 1 {
        errs.push(ModelError::BadServers {
            servers: params.n_servers,
        });
    }
    if params.buffer < 1 {
        errs.push(ModelError::BadBuffer {
            buffer: params.buffer,
        });
    }
    if check_finite(&mut errs, "service_rate", params.service_rate)
        && params.service_rate <= T::zero()
    {
        errs.push(ModelError::BadServiceRate {
            value: params.service_rate.to_f64_lossy(),
        });
    }
    for (field, value) in [
        ("e_switch", params.e_switch),
        ("e_on", params.e_on),
        ("delay_weight", params.delay_weight),
    ] {
        if check_finite(&mut errs, field, value) && value < T::zero() {
            errs.push(ModelError::NegativeWeight {
                field: field.into(),
                value: value.to_f64_lossy(),
            });
        }
    }
    match params.discount {
        Discount::PerSlot(r) => {
            if !(r >= T::zero() && r < T::one()) {
                errs.push(ModelError::BadDiscount {
                    field: "discount per slot".into(),
                    value: r.to_f64_lossy(),
                });
            }
        }
        Discount::Rate(beta) => {
            // beta = 0 would give r = 1
            if !(beta > T::zero() && beta.is_finite()) {
                errs.push(ModelError::BadDiscount {
                    field: "discount rate".into(),
                    value: beta.to_f64_lossy(),
                });
            }
        }
    }
    match params.slot {
        SlotSpec::Auto { safety } => {
            if !(safety > T::zero() && safety <= T::one()) {
                errs.push(ModelError::BadSlot {
                    field: "slot safety factor".into(),
                    value: safety.to_f64_lossy(),
                });
            }
        }
        SlotSpec::Fixed(dt) => {
            if !(dt > T::zero() && dt.is_finite()) {
                errs.push(ModelError::BadSlot {
                    field: "slot".into(),
                    value: dt.to_f64_lossy(),
                });
            }
        }
    }

    if errs.is_empty() {
        Ok(())
    } else {
        Err(ValidationErrors(errs))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseStatistics<T> {
    pub stationary: Vec<T>,
    pub mean_arrival_rate: T,
}

#[allow(clippy::needless_range_loop)]
fn strongly_connected<T: Scalar>(model: &MmppModel<T>) -> bool {
    let n = model.n_phases();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let r = if forward {
                    model.rate(i, j)
                } else {
                    model.rate(j, i)
                };
                if !seen[j] && r > T::zero() {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|x| x)
    };
    reach(true) && reach(false)
}

/// Stationary distribution of the phase chain and the long-run mean arrival rate.
#[allow(clippy::needless_range_loop)]
pub fn phase_statistics<T: Scalar>(model: &MmppModel<T>) -> Result<PhaseStatistics<T>, ModelError> {
    let n = model.n_phases();
    if n == 0 {
        return Err(ModelError::EmptyPhaseSet);
    }
    if !strongly_connected(model) {
        return Err(ModelError::ReducibleChain);
    }
    // Solve pi R = 0 with the last balance equation replaced by sum(pi) = 1,
    // i.e. A x = b with A = R^T except for the last row of ones.
    let gen = model.generator();
    let mut a: Vec<Vec<T>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == n - 1 { T::one() } else { gen[j][i] })
                .collect()
        })
        .collect();
    let mut b = vec![T::zero(); n];
    b[n - 1] = T::one();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() <= T::epsilon() {
            return Err(ModelError::ReducibleChain);
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = a[row][col] / a[col][col];
            if factor == T::zero() {
                continue;
            }
            for k in col..n {
                let delta = factor * a[col][k];
                a[row][k] -= delta;
            }
            let delta = factor * b[col];
            b[row] -= delta;
        }
    }
    let mut pi: Vec<T> = (0..n).map(|i| (b[i] / a[i][i]).max(T::zero())).collect();
    let total: T = pi.iter().copied().sum();
    for p in &mut pi {
        *p /= total;
    }
    let mean_arrival_rate = pi
        .iter()
        .zip(&model.arrival_rates)
        .map(|(&p, &l)| p * l)
        .sum();
    Ok(PhaseStatistics {
        stationary: pi,
        mean_arrival_rate,
    })
}

/// Largest per-slot event rate over all (phase, queue, action): the slot must
/// satisfy `slot * rate <= 1`. Returns the rate and a state/action attaining it.
pub fn worst_event_rate<T: Scalar>(
    model: &MmppModel<T>,
    params: &SystemParams<T>,
) -> (T, SysState, usize) {
    let m = params.n_servers;
    let b = params.buffer;
    let mut worst = (T::zero(), SysState::new(0, 0, m), m);
    // Only the queue boundary cases matter: Q = 0, Q = B, and any interior Q.
    let mut queues = vec![0, b];
    if b >= 2 {
        queues.push(1);
    }
    for s in 0..model.n_phases() {
        for &q in &queues {
            let arrival = if q < b {
                model.arrival_rates[s]
            } else {
                T::zero()
            };
            let service = if q > 0 {
                T::of_usize(m) * params.service_rate
            } else {
                T::zero()
            };
            let total = arrival + service + model.outflow_rate(s);
            if total > worst.0 {
                worst = (total, SysState::new(s, q, m), m);
            }
        }
    }
    worst
}

/// Resolves the slot length, either automatically or by checking an explicit one.
pub fn choose_slot_duration<T: Scalar>(
    model: &MmppModel<T>,
    params: &SystemParams<T>,
) -> Result<T, ModelError> {
    match params.slot {
        SlotSpec::Auto { safety } => {
            let bound = model.max_arrival_rate()
                + T::of_usize(params.n_servers) * params.service_rate
                + model.max_outflow_rate();
            if bound <= T::zero() {
                // nothing can ever happen; any slot is admissible
                return Ok(safety);
            }
            Ok(safety / bound)
        }
        SlotSpec::Fixed(dt) => {
            let (rate, worst, action) = worst_event_rate(model, params);
            let mass = rate * dt;
            if mass > T::one() {
                return Err(ModelError::SlotTooLarge {
                    slot: dt.to_f64_lossy(),
                    max_slot: (T::one() / rate).to_f64_lossy(),
                    worst,
                    action,
                    mass: mass.to_f64_lossy(),
                });
            }
            Ok(dt)
        }
    }
}

/// Per-slot discount factor for a slot of `slot` seconds.
pub fn discount_for_slot<T: Scalar>(params: &SystemParams<T>, slot: T) -> Result<T, ModelError> {
    let r = match params.discount {
        Discount::PerSlot(r) => r,
        Discount::Rate(beta) => (-beta * slot).exp(),
    };
    if r >= T::zero() && r < T::one() {
        Ok(r)
    } else {
        Err(ModelError::BadDiscount {
            field: match params.discount {
                Discount::PerSlot(_) => "discount per slot".into(),
                Discount::Rate(_) => "discount rate".into(),
            },
            value: r.to_f64_lossy(),
        })
    }
}

/// Reference instance used throughout the tests and the shipped scenario:
/// an IPP with ON/OFF phases and 15 servers.
pub fn reference_instance<T: Scalar>() -> (MmppModel<T>, SystemParams<T>) {
    let model = MmppModel::new(
        vec![T::of(5.0), T::zero()],
        vec![vec![T::zero(), T::of(0.5)], vec![T::of(0.25), T::zero()]],
    )
    .with_phase_names(vec!["ON".into(), "OFF".into()]);
    let params = SystemParams {
        n_servers: 15,
        service_rate: T::one() / T::of(0.12),
        buffer: 250,
        e_switch: T::of(200.0),
        e_on: T::of(2.5),
        delay_weight: T::of(0.2),
        discount: Discount::Rate(-(T::of(0.999).ln()) / T::of(0.01)),
        slot: SlotSpec::default(),
    };
    (model, params)
}
