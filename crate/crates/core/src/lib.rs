//! Optimal sleep/wake control of a multi-server queue fed by Markov-modulated
//! Poisson traffic.
//!
//! The crate builds a slotted discounted MDP over (phase, queue length,
//! active servers), solves it by value or policy iteration, checks the
//! structure of the solution (monotone, hysteretic, submodular), extracts
//! turn-on/turn-off thresholds and estimates policy costs by simulation.
//!
//! Everything is generic over the scalar type; the aliases below fix it to `f64`.

pub mod cli;
pub mod config;
pub mod export;
pub mod mdp;
pub mod model;
pub mod scalar;
pub mod sim;
pub mod solver;
pub mod structure;

pub use mdp::{build_kernel, Action, StateSpace, SysState};
pub use model::{Discount, ModelError, SlotSpec};
pub use scalar::Scalar;
pub use solver::Policy;
pub use structure::ThresholdTable;

pub type Model = model::MmppModel<f64>;
pub type Params = model::SystemParams<f64>;
pub type Mdp = mdp::SleepMdp<f64>;
pub type Values = solver::ValueFunction<f64>;
pub type QValues = solver::QFactor<f64>;
pub type Solution = solver::Solution<f64>;
