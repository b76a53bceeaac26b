//! Scenario files.
//!
//! A scenario is one JSON document holding the traffic model, the system
//! parameters, solver settings, simulation settings and the output directory.
//! Unknown keys are rejected. Rates are per second; each cost weight is given
//! either per slot or per second (exactly one of the pair).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mdp::SysState;
use crate::model::{
    choose_slot_duration, discount_for_slot, validate_model, Discount, MmppModel, ModelError,
    SlotSpec, SystemParams, ValidationErrors, DEFAULT_SLOT_SAFETY,
};
use crate::sim::{Horizon, SimConfig, DEFAULT_TAIL_TOLERANCE};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("invalid scenario: {0}")]
    Validation(#[from] ValidationErrors),
    #[error(transparent)]
    Model(ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phase_names: Vec<String>,
    pub arrival_rates_per_s: Vec<f64>,
    /// Off-diagonal phase switching rates; the diagonal is ignored.
    pub transition_rates_per_s: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DiscountSection {
    PerSlot(f64),
    RatePerS(f64),
    /// `factor` per `interval_s` seconds, rescaled to whatever slot is used.
    PerInterval {
        factor: f64,
        interval_s: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SlotSection {
    Auto,
    Fixed { seconds: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub servers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service_rate_per_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_service_time_s: Option<f64>,
    pub buffer_jobs: usize,
    pub e_switch_j: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_on_j_per_slot: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_on_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_weight_per_slot: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_weight_per_s: Option<f64>,
    pub discount: DiscountSection,
    #[serde(default = "default_slot")]
    pub slot: SlotSection,
    #[serde(default = "default_safety")]
    pub slot_safety: f64,
}

fn default_slot() -> SlotSection {
    SlotSection::Auto
}

fn default_safety() -> f64 {
    DEFAULT_SLOT_SAFETY
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Vi,
    Pi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub algorithm: Algorithm,
    pub epsilon: f64,
    /// Sweeps for value iteration, improvement steps for policy iteration.
    pub max_iters: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            algorithm: Algorithm::Vi,
            epsilon: 1e-6,
            max_iters: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    /// Defaults to the phase with the lowest arrival rate, empty queue, all off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<SysState>,
    pub replications: usize,
    pub tail_tolerance: f64,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            start: None,
            replications: 1000,
            tail_tolerance: DEFAULT_TAIL_TOLERANCE,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model: ModelSection,
    pub system: SystemSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

/// A scenario resolved to solver inputs.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: MmppModel<f64>,
    pub params: SystemParams<f64>,
    pub slot: f64,
    pub discount: f64,
    pub sim: SimConfig,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// SHA-256 of the compact serialization, so formatting does not matter.
    pub fn sha256(&self) -> String {
        let compact = serde_json::to_string(self).expect("scenario serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }

    /// The shipped reference scenario: an ON/OFF source feeding 15 servers,
    /// discount 0.999 per 10 ms expressed as a continuous rate.
    pub fn reference() -> Self {
        ScenarioConfig {
            model: ModelSection {
                phase_names: vec!["ON".into(), "OFF".into()],
                arrival_rates_per_s: vec![5.0, 0.0],
                transition_rates_per_s: vec![vec![0.0, 0.5], vec![0.25, 0.0]],
            },
            system: SystemSection {
                servers: 15,
                service_rate_per_s: None,
                mean_service_time_s: Some(0.12),
                buffer_jobs: 250,
                e_switch_j: 200.0,
                e_on_j_per_slot: Some(2.5),
                e_on_w: None,
                delay_weight_per_slot: Some(0.2),
                delay_weight_per_s: None,
                discount: DiscountSection::PerInterval {
                    factor: 0.999,
                    interval_s: 0.01,
                },
                slot: SlotSection::Auto,
                slot_safety: DEFAULT_SLOT_SAFETY,
            },
            solver: SolverSection::default(),
            sim: SimSection {
                start: None,
                replications: 10_000,
                tail_tolerance: DEFAULT_TAIL_TOLERANCE,
                seed: 20_240_601,
            },
            output_dir: None,
        }
    }

    /// Checks the scenario and resolves the slot length and per-slot discount.
    ///
    /// Structural problems come back together as one `Validation` error; an
    /// explicit slot that breaks the one-event bound comes back as
    /// `Model(SlotTooLarge)`.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let sys = &self.system;
        let mut problems = Vec::new();
        let service_rate = match (sys.service_rate_per_s, sys.mean_service_time_s) {
            (Some(rate), None) => rate,
            (None, Some(mean)) => 1.0 / mean,
            _ => {
                problems.push(
                    "give exactly one of service_rate_per_s, mean_service_time_s".to_string(),
                );
                f64::NAN
            }
        };
        let (e_on, e_on_per_s) = pick_weight(
            &mut problems,
            "e_on_j_per_slot",
            sys.e_on_j_per_slot,
            "e_on_w",
            sys.e_on_w,
        );
        let (delay, delay_per_s) = pick_weight(
            &mut problems,
            "delay_weight_per_slot",
            sys.delay_weight_per_slot,
            "delay_weight_per_s",
            sys.delay_weight_per_s,
        );
        let n = self.model.arrival_rates_per_s.len();
        if !self.model.phase_names.is_empty() && self.model.phase_names.len() != n {
            problems.push(format!(
                "phase_names has {} entries for {n} phases",
                self.model.phase_names.len()
            ));
        }
        if !problems.is_empty() {
            return Err(ConfigError::Invalid(problems.join("; ")));
        }
        let discount = match sys.discount {
            DiscountSection::PerSlot(r) => Discount::PerSlot(r),
            DiscountSection::RatePerS(beta) => Discount::Rate(beta),
            DiscountSection::PerInterval { factor, interval_s } => {
                if !(factor > 0.0 && factor < 1.0 && interval_s > 0.0) {
                    return Err(ConfigError::Invalid(format!(
                        "per_interval discount needs 0 < factor < 1 and interval_s > 0, got {factor} per {interval_s} s"
                    )));
                }
                Discount::Rate(-factor.ln() / interval_s)
            }
        };
        let slot_spec = match sys.slot {
            SlotSection::Auto => SlotSpec::Auto {
                safety: sys.slot_safety,
            },
            SlotSection::Fixed { seconds } => SlotSpec::Fixed(seconds),
        };
        let mut model = MmppModel::new(
            self.model.arrival_rates_per_s.clone(),
            self.model.transition_rates_per_s.clone(),
        );
        if !self.model.phase_names.is_empty() {
            model = model.with_phase_names(self.model.phase_names.clone());
        }
        let mut params = SystemParams {
            n_servers: sys.servers,
            service_rate,
            buffer: sys.buffer_jobs,
            e_switch: sys.e_switch_j,
            e_on,
            delay_weight: delay,
            discount,
            slot: slot_spec,
        };
        validate_model(&model, &params)?;
        let slot = choose_slot_duration(&model, &params).map_err(ConfigError::Model)?;
        let r = discount_for_slot(&params, slot).map_err(ConfigError::Model)?;
        if e_on_per_s {
            params.e_on *= slot;
        }
        if delay_per_s {
            params.delay_weight *= slot;
        }
        let start = match self.sim.start {
            Some(st) => {
                if st.phase >= n {
                    return Err(ConfigError::Invalid(format!(
                        "sim.start.phase must lie in 1..={n}, got {}",
                        st.phase + 1
                    )));
                }
                st
            }
            None => SysState::new(model.quietest_phase(), 0, 0),
        };
        let sim = SimConfig {
            start,
            replications: self.sim.replications,
            horizon: Horizon::TailTolerance(self.sim.tail_tolerance),
            seed: self.sim.seed,
        };
        Ok(Resolved {
            model,
            params,
            slot,
            discount: r,
            sim,
        })
    }
}

/// Returns the chosen value and whether it was the per-second variant.
fn pick_weight(
    problems: &mut Vec<String>,
    slot_key: &str,
    per_slot: Option<f64>,
    second_key: &str,
    per_second: Option<f64>,
) -> (f64, bool) {
    match (per_slot, per_second) {
        (Some(v), None) => (v, false),
        (None, Some(v)) => (v, true),
        _ => {
            problems.push(format!("give exactly one of {slot_key}, {second_key}"));
            (f64::NAN, false)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::reference_instance;

    #[test]
    fn reference_matches_library_instance() {
        let res = ScenarioConfig::reference().resolve().unwrap();
        let (m, p) = reference_instance::<f64>();
        assert_eq!(res.model, m);
        assert_eq!(res.params.n_servers, p.n_servers);
        assert!((res.params.service_rate - p.service_rate).abs() < 1e-12);
        assert!((res.slot - 0.9 / 130.5).abs() < 1e-15);
        // 0.999 per 10 ms rescaled to the chosen slot
        assert!((res.discount - 0.999f64.powf(res.slot / 0.01)).abs() < 1e-14);
        assert_eq!(res.sim.start, SysState::new(1, 0, 0));
    }

    #[test]
    fn dump_round_trips() {
        let cfg = ScenarioConfig::reference();
        let back = ScenarioConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.sha256(), cfg.sha256());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&ScenarioConfig::reference().to_json_pretty()).unwrap();
        v["system"]["buffer"] = 10.into();
        let err = ScenarioConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
    }

    #[test]
    fn validation_collects_every_problem() {
        let mut cfg = ScenarioConfig::reference();
        cfg.model.arrival_rates_per_s[0] = -1.0;
        cfg.system.e_switch_j = -3.0;
        cfg.system.servers = 0;
        match cfg.resolve() {
            Err(ConfigError::Validation(errs)) => assert_eq!(errs.0.len(), 3, "{errs}"),
            other => panic!("expected validation errors, got {other:?}"),
        }
    }

    #[test]
    fn explicit_ten_ms_slot_is_too_large() {
        let mut cfg = ScenarioConfig::reference();
        cfg.system.slot = SlotSection::Fixed { seconds: 0.01 };
        match cfg.resolve() {
            Err(ConfigError::Model(ModelError::SlotTooLarge { max_slot, .. })) => {
                assert!((max_slot - 1.0 / 130.5).abs() < 1e-12)
            }
            other => panic!("expected SlotTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn per_second_weights_scale_with_slot() {
        let mut cfg = ScenarioConfig::reference();
        cfg.system.e_on_j_per_slot = None;
        cfg.system.e_on_w = Some(250.0);
        let res = cfg.resolve().unwrap();
        assert!((res.params.e_on - 250.0 * res.slot).abs() < 1e-12);
    }

    #[test]
    fn both_weight_forms_is_an_error() {
        let mut cfg = ScenarioConfig::reference();
        cfg.system.e_on_w = Some(1.0);
        assert!(matches!(cfg.resolve(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn per_slot_discount_is_used_verbatim() {
        let mut cfg = ScenarioConfig::reference();
        cfg.system.discount = DiscountSection::PerSlot(0.999);
        assert_eq!(cfg.resolve().unwrap().discount, 0.999);
    }
}
