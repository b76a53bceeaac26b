use proptest::prelude::*;

use sleepwake::mdp::{build_kernel, StateSpace, SysState};
use sleepwake::model::{choose_slot_duration, Discount, MmppModel, SlotSpec, SystemParams};
use sleepwake::sim::{estimate_discounted_cost, Horizon, SimConfig};
use sleepwake::solver::{bellman_backup, value_iteration, Policy, QFactor};
use sleepwake::structure::{check_monotone, check_partial_submodular, extract_thresholds};

fn instance() -> impl Strategy<Value = (MmppModel<f64>, SystemParams<f64>)> {
    (1usize..=3, 1usize..=4, 1usize..=8)
        .prop_flat_map(|(n, m, b)| {
            (
                prop::collection::vec(0.0f64..6.0, n),
                prop::collection::vec(prop::collection::vec(0.0f64..2.0, n), n),
                0.5f64..4.0,
                Just((m, b)),
                0.1f64..1.0,
                (0.0f64..50.0, 0.0f64..5.0, 0.0f64..2.0),
            )
        })
        .prop_map(|(lambda, rates, mu, (m, b), safety, (e_sw, e_on, w))| {
            let model = MmppModel::new(lambda, rates);
            let params = SystemParams {
                n_servers: m,
                service_rate: mu,
                buffer: b,
                e_switch: e_sw,
                e_on,
                delay_weight: w,
                discount: Discount::PerSlot(0.95),
                slot: SlotSpec::Auto { safety },
            };
            (model, params)
        })
}

/// Direct check of `u(Q', a') - u(Q', a) <= u(Q, a') - u(Q, a)` over all
/// `Q < Q'`, `a < a'`.
fn submodular_by_pairs(q: &QFactor<f64>) -> bool {
    let sp = *q.space();
    for phase in 0..sp.n_phases {
        for w in 0..=sp.n_servers {
            for q0 in 0..=sp.buffer {
                for q1 in q0 + 1..=sp.buffer {
                    let (lo, hi) = (SysState::new(phase, q0, w), SysState::new(phase, q1, w));
                    for a0 in 0..=sp.n_servers {
                        for a1 in a0 + 1..=sp.n_servers {
                            if q.get(hi, a1) - q.get(hi, a0) > q.get(lo, a1) - q.get(lo, a0) {
                                return false;
                            }
                        }
                    }
                }
            }
        }
    }
    true
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_rows_are_distributions((model, params) in instance()) {
        let slot = choose_slot_duration(&model, &params).unwrap();
        let mdp = build_kernel(&model, &params, slot).unwrap();
        let sp = *mdp.space();
        for s in sp.iter() {
            for a in 0..sp.n_actions() {
                let mut total = 0.0;
                for (next, p) in mdp.kernel.row(s, sleepwake::Action(a)) {
                    prop_assert!((0.0..=1.0).contains(&p));
                    // one event per slot: queue moves by at most one and the
                    // active count becomes the action
                    prop_assert!(next.queue.abs_diff(s.queue) <= 1);
                    prop_assert_eq!(next.active, a);
                    total += p;
                }
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjacent_check_agrees_with_all_pairs(
        (n, b, m) in (1usize..=2, 1usize..=4, 1usize..=3),
        seed in any::<u64>(),
    ) {
        // small integers keep every difference exact
        let sp = StateSpace::new(n, b, m);
        let q = QFactor::from_fn(sp, |s, a| {
            let h = (s.phase * 131 + s.queue * 31 + s.active * 7 + a * 3) as u64 ^ seed;
            ((h.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 60) as f64) - 8.0 + (s.queue * a) as f64 * -2.0
        });
        prop_assert_eq!(check_partial_submodular(&q, 0.0).passed, submodular_by_pairs(&q));
    }

    #[test]
    fn thresholds_reproduce_monotone_policies(
        (n, b, m) in (1usize..=2, 1usize..=10, 1usize..=5),
        steps in prop::collection::vec(prop::collection::vec(0usize..3, 11), 12),
    ) {
        // each (phase, active) profile is a running sum of random increments, capped at M
        let sp = StateSpace::new(n, b, m);
        let policy = Policy::from_fn(sp, |s| {
            let incs = &steps[(s.phase * (m + 1) + s.active) % steps.len()];
            incs[..=s.queue].iter().sum::<usize>().min(m)
        });
        prop_assert!(check_monotone(&policy).passed);
        let table = extract_thresholds(&policy).unwrap();
        prop_assert_eq!(table.to_policy(), policy);
    }

    #[test]
    fn greedy_policy_of_converged_values_is_a_fixed_point((model, params) in instance()) {
        let slot = choose_slot_duration(&model, &params).unwrap();
        let mdp = build_kernel(&model, &params, slot).unwrap();
        let sol = value_iteration(&mdp.kernel, &mdp.costs, 0.95, 1e-10, 100_000);
        prop_assert!(sol.report.converged);
        let again = bellman_backup(&sol.values, &mdp.kernel, &mdp.costs, 0.95);
        prop_assert!(again.values.sup_distance(&sol.values) <= 1e-10 * 0.95 / 0.05 + 1e-9);
        for (i, &a) in sol.policy.as_slice().iter().enumerate() {
            let row = sol.qfactor.row(i);
            prop_assert!(row[..a].iter().all(|&u| u > row[a]));
            prop_assert!(row[a..].iter().all(|&u| u >= row[a]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn simulation_is_reproducible_from_the_seed((model, params) in instance(), seed in any::<u64>()) {
        let slot = choose_slot_duration(&model, &params).unwrap();
        let sp = StateSpace::of(&model, &params);
        let policy = Policy::from_fn(sp, |s| s.queue.min(params.n_servers));
        let cfg = SimConfig {
            start: SysState::new(0, 0, 0),
            replications: 4,
            horizon: Horizon::Slots(300),
            seed,
        };
        let a = estimate_discounted_cost(&policy, &model, &params, slot, 0.95, &cfg).unwrap();
        let b = estimate_discounted_cost(&policy, &model, &params, slot, 0.95, &cfg).unwrap();
        prop_assert_eq!(a, b);
        let mut shifted = cfg;
        shifted.horizon = Horizon::TailTolerance(1e-6);
        let c = estimate_discounted_cost(&policy, &model, &params, slot, 0.95, &shifted).unwrap();
        prop_assert_eq!(c.horizon_slots, 270);
    }
}
