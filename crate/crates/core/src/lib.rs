//! Agent-based simulator of leveraged value investors trading a single asset
//! against a mean-reverting noise trader, under three credit policies: a
//! fixed leverage cap, volatility-dependent haircuts with a loan spread, and
//! fully option-hedged lending.

pub mod clearing;
pub mod error;
pub mod metrics;
pub mod options;
pub mod params;
pub mod regulation;
pub mod runner;
pub mod sim;
pub mod stats;

pub use error::{ClearingFailure, ParamError, RunnerError, SimError};
pub use params::{Scheme, SimParams};
pub use sim::{FundState, MarketState, NoiseState, Policy, Simulation, StepReport};
