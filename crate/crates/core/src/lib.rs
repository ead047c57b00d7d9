//! Quickest event detection with optimal sleep-wake scheduling of sensors.
//!
//! A fusion centre watches `n` identical sensors for a change in the
//! distribution of their observations. Each slot it either raises an alarm or
//! continues, and when it continues it decides how many sensors sample in the
//! next slot. The a posteriori probability of change is a sufficient
//! statistic, so all three scheduling strategies reduce to Bellman equations
//! on `[0, 1]`:
//!
//! - closed-loop control of the awake count `M` ([`Strategy::ControlM`]),
//! - closed-loop control of the per-sensor wake probability `q`
//!   ([`Strategy::ControlQ`]),
//! - open-loop, time-invariant `q` ([`Strategy::OpenLoop`]).
//!
//! [`dp`] solves these by value iteration on a belief grid, [`policy`]
//! extracts the stopping threshold and wake maps, [`sim`] runs Monte Carlo
//! episodes against a policy, and [`oracle`] is an exhaustive finite-horizon
//! reference used to validate the grid DP.

#![forbid(unsafe_code)]

pub mod belief;
pub mod dp;
pub mod error;
pub mod model;
pub mod oracle;
pub mod policy;
pub mod sim;

mod numeric;

pub use belief::Belief;
pub use dp::{
    BeliefGrid, BeliefMdp, QuadratureConfig, SolveReport, SolverConfig, Strategy, ValueFunction,
};
pub use error::{Error, Result};
pub use model::{ChangePrior, Costs, Problem, Regime, SensorModel};
pub use policy::{Action, Policy, PolicyKind};
pub use sim::{EpisodeResult, Metrics, SimConfig};
