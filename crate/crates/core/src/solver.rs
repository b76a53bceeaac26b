//! Discounted-cost solvers: Bellman backup, finite-horizon induction, value
//! iteration and policy iteration.
//!
//! Argmin ties always go to the smallest action.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mdp::{Action, StageCosts, StateSpace, SysState, TransitionKernel};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction<T> {
    space: StateSpace,
    values: Vec<T>,
}

impl<T: Scalar> ValueFunction<T> {
    pub fn zeros(space: StateSpace) -> Self {
        Self {
            space,
            values: vec![T::zero(); space.len()],
        }
    }

    pub fn from_vec(space: StateSpace, values: Vec<T>) -> Self {
        assert_eq!(values.len(), space.len(), "one value per state");
        Self { space, values }
    }

    pub fn from_fn(space: StateSpace, f: impl Fn(SysState) -> T) -> Self {
        Self {
            space,
            values: space.iter().map(f).collect(),
        }
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn get(&self, s: SysState) -> T {
        self.values[self.space.index(s)]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    /// `max |self - other|`.
    pub fn sup_distance(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }
}

/// `u(S, Q, W, a)`: stage cost plus discounted expected cost-to-go.
#[derive(Debug, Clone, PartialEq)]
pub struct QFactor<T> {
    space: StateSpace,
    values: Vec<T>,
}

impl<T: Scalar> QFactor<T> {
    pub fn from_fn(space: StateSpace, f: impl Fn(SysState, usize) -> T) -> Self {
        let n_actions = space.n_actions();
        let mut values = Vec::with_capacity(space.len() * n_actions);
        for s in space.iter() {
            for a in 0..n_actions {
                values.push(f(s, a));
            }
        }
        Self { space, values }
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    #[inline]
    pub fn get(&self, s: SysState, action: usize) -> T {
        self.values[self.space.index(s) * self.space.n_actions() + action]
    }

    pub fn set(&mut self, s: SysState, action: usize, value: T) {
        let i = self.space.index(s) * self.space.n_actions() + action;
        self.values[i] = value;
    }

    /// Row of all actions at state index `i`.
    pub fn row(&self, i: usize) -> &[T] {
        let n = self.space.n_actions();
        &self.values[i * n..(i + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Policy {
    space: StateSpace,
    actions: Vec<usize>,
}

impl Policy {
    pub fn from_vec(space: StateSpace, actions: Vec<usize>) -> Self {
        assert_eq!(actions.len(), space.len(), "one action per state");
        assert!(
            actions.iter().all(|&a| a <= space.n_servers),
            "actions must lie in 0..=M"
        );
        Self { space, actions }
    }

    pub fn from_fn(space: StateSpace, f: impl Fn(SysState) -> usize) -> Self {
        Self::from_vec(space, space.iter().map(f).collect())
    }

    pub fn constant(space: StateSpace, action: usize) -> Self {
        Self::from_vec(space, vec![action; space.len()])
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    #[inline]
    pub fn action(&self, s: SysState) -> usize {
        self.actions[self.space.index(s)]
    }

    #[inline]
    pub fn action_at(&self, index: usize) -> usize {
        self.actions[index]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.actions
    }

    /// Number of states where the two policies differ.
    pub fn differences(&self, other: &Policy) -> usize {
        self.actions
            .iter()
            .zip(&other.actions)
            .filter(|(a, b)| a != b)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub algorithm: String,
    pub iterations: usize,
    pub converged: bool,
    /// Final sup-norm Bellman residual.
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub duration_s: f64,
}

#[derive(Debug, Clone)]
pub struct Backup<T> {
    pub values: ValueFunction<T>,
    pub policy: Policy,
    pub qfactor: QFactor<T>,
}

#[derive(Debug, Clone)]
pub struct Solution<T> {
    pub values: ValueFunction<T>,
    pub policy: Policy,
    pub qfactor: QFactor<T>,
    pub report: SolveReport,
}

/// `w(S, Q, a) = omega*Q + a*E_on + r * E[V(next)]` for every post-decision row.
fn post_values<T: Scalar>(
    kernel: &TransitionKernel<T>,
    costs: &StageCosts<T>,
    r: T,
    values: &[T],
) -> Vec<T> {
    let mut w = vec![T::zero(); kernel.space().len()];
    w.par_iter_mut().enumerate().for_each(|(p, out)| {
        *out = costs.holding(p) + r * kernel.expect(p, values);
    });
    w
}

/// Smallest index attaining the minimum.
#[inline]
fn argmin<T: Scalar>(row: &[T]) -> (usize, T) {
    let mut best = 0;
    let mut best_val = row[0];
    for (a, &v) in row.iter().enumerate().skip(1) {
        if v < best_val {
            best = a;
            best_val = v;
        }
    }
    (best, best_val)
}

/// One application of the Bellman optimality operator.
pub fn bellman_backup<T: Scalar>(
    values: &ValueFunction<T>,
    kernel: &TransitionKernel<T>,
    costs: &StageCosts<T>,
    r: T,
) -> Backup<T> {
    let space = *kernel.space();
    let n_actions = space.n_actions();
    let w = post_values(kernel, costs, r, values.as_slice());
    let mut q = vec![T::zero(); space.len() * n_actions];
    let mut v = vec![T::zero(); space.len()];
    let mut pi = vec![0usize; space.len()];
    q.par_chunks_mut(n_actions)
        .zip(v.par_iter_mut())
        .zip(pi.par_iter_mut())
        .enumerate()
        .for_each(|(i, ((row, v), pi))| {
            let active = i % n_actions;
            let block = i - active;
            for (a, out) in row.iter_mut().enumerate() {
                *out = costs.switching(active, a) + w[block + a];
            }
            let (a, best) = argmin(row);
            *v = best;
            *pi = a;
        });
    Backup {
        values: ValueFunction::from_vec(space, v),
        policy: Policy::from_vec(space, pi),
        qfactor: QFactor { space, values: q },
    }
}

#[derive(Debug, Clone)]
pub struct FiniteHorizon<T> {
    /// `values[t - 1]` is the t-step cost-to-go `V_t`.
    pub values: Vec<ValueFunction<T>>,
    pub policies: Vec<Policy>,
}

/// `V_1 .. V_T` by backward induction from `V_0 = 0`.
pub fn finite_horizon_values<T: Scalar>(
    kernel: &TransitionKernel<T>,
    costs: &StageCosts<T>,
    r: T,
    horizon: usize,
) -> FiniteHorizon<T> {
    assert!(horizon >= 1, "horizon must be at least 1");
    let mut current = ValueFunction::zeros(*kernel.space());
    let mut values = Vec::with_capacity(horizon);
    let mut policies = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let b = bellman_backup(&current, kernel, costs, r);
        current = b.values.clone();
        values.push(b.values);
        policies.push(b.policy);
    }
    FiniteHorizon { values, policies }
}

/// Value iteration from `V_0 = 0`.
pub fn value_iteration<T: Scalar>(
    kernel: &TransitionKernel<T>,
    costs: &StageCosts<T>,
    r: T,
    epsilon: T,
    max_iters: usize,
) -> Solution<T> {
    value_iteration_observed(kernel, costs, r, epsilon, max_iters, |_, _, _| {})
}

/// Value iteration that hands every iterate `(k, V_k, residual_k)` to `observer`.
///
/// The sweep is carried in increment form: alongside `V_k` it keeps the
/// increment `D_k = V_k - V_{k-1}` and the gaps `u_k(s, a) - V_k(s)`, and
/// updates them with `r * P * D`. The residual `max |D_k|` is then computed
/// to the precision of `D` rather than of `V`, which keeps the contraction
/// bound checkable down to tiny residuals.
///
/// Stops once `max |D_k| < epsilon` (or after `max_iters` sweeps, flagged as
/// not converged) and returns `T V_k` with its greedy policy and Q-factor.
pub fn value_iteration_observed<T: Scalar>(
    kernel: &TransitionKernel<T>,
    costs: &StageCosts<T>,
    r: T,
    epsilon: T,
    max_iters: usize,
    mut observer: impl FnMut(usize, &ValueFunction<T>, T),
) -> Solution<T> {
    assert!(epsilon > T::zero(), "epsilon must be positive");
    let started = Instant::now();
    let space = *kernel.space();
    let n = space.len();
    let n_actions = space.n_actions();

    // First sweep from V_0 = 0: u_1(s, a) = s(W, a) + omega*Q + a*E_on.
    let mut gaps = vec![T::zero(); n * n_actions];
    let mut incr = vec![T::zero(); n];
    let mut values = ValueFunction::zeros(space);
    gaps.par_chunks_mut(n_actions)
        .zip(incr.par_iter_mut())
        .enumerate()
        .for_each(|(i, (row, d))| {
            let active = i % n_actions;
            let block = i - active;
            for (a, g) in row.iter_mut().enumerate() {
                *g = costs.switching(active, a) + costs.holding(block + a);
            }
            let (_, best) = argmin(row);
            for g in row.iter_mut() {
                *g -= best;
            }
            *d = best;
        });
    let mut post_incr = vec![T::zero(); n];
    let mut history = Vec::new();
    let mut residual = sup_norm(&incr);
    let mut iterations = 0;
    let mut converged = false;
    let mut next = vec![T::zero(); n];
    if max_iters > 0 {
        values.values.copy_from_slice(&incr);
        iterations = 1;
        history.push(residual.to_f64_lossy());
        observer(iterations, &values, residual);
        converged = residual < epsilon;
    }
    while !converged && iterations < max_iters {
        post_incr
            .par_iter_mut()
            .enumerate()
            .for_each(|(p, out)| *out = r * kernel.expect(p, &incr));
        gaps.par_chunks_mut(n_actions)
            .zip(next.par_iter_mut())
            .enumerate()
            .for_each(|(i, (row, d))| {
                let active = i % n_actions;
                let block = i - active;
                for (a, g) in row.iter_mut().enumerate() {
                    *g += post_incr[block + a];
                }
                let (_, best) = argmin(row);
                for g in row.iter_mut() {
                    *g -= best;
                }
                *d = best;
            });
        std::mem::swap(&mut incr, &mut next);
        for (v, &d) in values.values.iter_mut().zip(&incr) {
            *v += d;
        }
        residual = sup_norm(&incr);
        iterations += 1;
        history.push(residual.to_f64_lossy());
        observer(iterations, &values, residual);
        converged = residual < epsilon;
    }

    let b = bellman_backup(&values, kernel, costs, r);
    Solution {
        values: b.values,
        policy: b.policy,
        qfactor: b.qfactor,
        report: SolveReport {
            algorithm: "value_iteration".into(),
            iterations,
            converged,
            residual: residual.to_f64_lossy(),
            residual_history: history,
            duration_s: started.elapsed().as_secs_f64(),
        },
    }
}

fn sup_norm<T: Scalar>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
}

/// Per-state stage cost and post-decision row under a fixed policy.
fn policy_rows<T: Scalar>(policy: &Policy, costs: &StageCosts<T>) -> (Vec<T>, Vec<usize>) {
    let space = *policy.space();
    space
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let a = policy.action_at(i);
            (costs.cost(s, Action(a)), space.post_index(s, a))
        })
        .unzip()
}

/// Iterates `V <- c_pi + r P_pi V` from `initial` until the sup-norm change
/// (the Bellman residual of the returned values) drops below `epsilon`.
pub fn policy_evaluation_from<T: Scalar>(
    policy: &Policy,
    initial: &ValueFunction<T>,
    kernel: &TransitionKernel<T>,
    costs: &StageCosts<T>,
    r: T,
    epsilon: T,
) -> (ValueFunction<T>, usize) {
    assert!(epsilon > T::zero(), "epsilon must be positive");
    let (cost, post) = policy_rows(policy, costs);
    let mut values = initial.clone();
    let mut incr: Vec<T> = (0..cost.len())
        .map(|i| cost[i] + r * kernel.expect(post[i], initial.as_slice()) - initial.values[i])
        .collect();
    let mut next = vec![T::zero(); incr.len()];
    let mut sweeps = 1;
    loop {
        for (v, &d) in values.values.iter_mut().zip(&incr) {
            *v += d;
        }
        if sup_norm(&incr) < epsilon {
            return (values, sweeps);
        }
        next.par_iter_mut()
            .enumerate()
            .for_each(|(i, out)| *out = r * kernel.expect(post[i], &incr));
        std::mem::swap(&mut incr, &mut next);
        sweeps += 1;
    }
}

/// Value of a fixed policy, starting from zero.
pub fn policy_evaluation<T: Scalar>(
    policy: &Policy,
    kernel: &TransitionKernel<T>,
    costs: &StageCosts<T>,
    r: T,
    epsilon: T,
) -> ValueFunction<T> {
    policy_evaluation_from(
        policy,
        &ValueFunction::zeros(*kernel.space()),
        kernel,
        costs,
        r,
        epsilon,
    )
    .0
}

/// Policy iteration from the always-off policy.
pub fn policy_iteration<T: Scalar>(
    kernel: &TransitionKernel<T>,
    costs: &StageCosts<T>,
    r: T,
    epsilon: T,
) -> Solution<T> {
    policy_iteration_from(
        Policy::constant(*kernel.space(), 0),
        kernel,
        costs,
        r,
        epsilon,
        DEFAULT_MAX_POLICY_ITERATIONS,
    )
}

pub const DEFAULT_MAX_POLICY_ITERATIONS: usize = 1000;

/// Policy iteration from `initial`.
///
/// Each evaluation is run to a Bellman residual of `epsilon * (1 - r)`, so the
/// returned values are within `epsilon` of the exact value of the returned
/// policy. The improvement step is the greedy smallest-argmin policy; the
/// loop ends when it reproduces the current policy.
pub fn policy_iteration_from<T: Scalar>(
    initial: Policy,
    kernel: &TransitionKernel<T>,
    costs: &StageCosts<T>,
    r: T,
    epsilon: T,
    max_iters: usize,
) -> Solution<T> {
    let started = Instant::now();
    let space = *kernel.space();
    let eval_eps = epsilon * (T::one() - r);
    let mut policy = initial;
    let mut values = ValueFunction::zeros(space);
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let (v, _) = policy_evaluation_from(&policy, &values, kernel, costs, r, eval_eps);
        values = v;
        iterations += 1;
        let b = bellman_backup(&values, kernel, costs, r);
        let changed = b.policy.differences(&policy);
        history.push(b.values.sup_distance(&values).to_f64_lossy());
        if changed == 0 || iterations >= max_iters {
            return Solution {
                values,
                policy,
                qfactor: b.qfactor,
                report: SolveReport {
                    algorithm: "policy_iteration".into(),
                    iterations,
                    converged: changed == 0,
                    residual: *history.last().unwrap(),
                    residual_history: history,
                    duration_s: started.elapsed().as_secs_f64(),
                },
            };
        }
        policy = b.policy;
    }
}
