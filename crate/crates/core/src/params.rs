//! Exogenous model parameters and credit-policy selection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ParamError;

/// Credit-regulation regime applied by the bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Fixed leverage cap, zero borrowing cost.
    Unregulated,
    /// Volatility-dependent haircuts plus a fixed loan spread.
    Basle,
    /// Every leveraged position carries a one-step option paid for by the fund.
    PerfectHedge,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Unregulated, Scheme::Basle, Scheme::PerfectHedge];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Unregulated => "unregulated",
            Scheme::Basle => "basle",
            Scheme::PerfectHedge => "perfect_hedge",
        }
    }

    /// Stable small integer used when deriving per-cell seeds.
    pub fn index(self) -> u64 {
        match self {
            Scheme::Unregulated => 0,
            Scheme::Basle => 1,
            Scheme::PerfectHedge => 2,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "unregulated" => Ok(Scheme::Unregulated),
            "basle" | "basel" => Ok(Scheme::Basle),
            "perfect_hedge" | "perfecthedge" | "hedge" => Ok(Scheme::PerfectHedge),
            other => Err(ParamError::UnknownScheme(other.to_string())),
        }
    }
}

/// Full parameter set of one simulation run.
///
/// Field names follow the flat keys accepted by the config file
/// (`params.rho`, `params.lambda_max`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    /// Aggression of each fund manager; the fund count is `betas.len()`.
    pub betas: Vec<f64>,
    /// Persistence of the noise trader's log demand.
    pub rho: f64,
    /// Standard deviation of the noise trader's per-step log-demand shock.
    pub sigma_n: f64,
    /// Fundamental value.
    pub v: f64,
    /// Total share supply.
    pub n: f64,
    /// Benchmark return per step demanded by fund investors.
    pub r_b: f64,
    /// Weight of the newest return in the performance moving average.
    pub a: f64,
    /// Flow sensitivity to excess performance.
    pub b: f64,
    pub w0: f64,
    pub w_crit: f64,
    /// Steps a failed fund stays out of the market before replacement.
    pub t_reintro: u32,
    /// Historical-volatility window length in steps.
    pub tau: usize,
    /// Option-pricing volatility multiplier.
    pub theta: f64,
    /// Benchmark volatility.
    pub sigma_b: f64,
    /// Per-step loan spread.
    pub spread: f64,
    /// Per-step benchmark interest rate.
    pub i_b: f64,
    pub lambda_max: f64,
    pub short_selling: bool,
    pub scheme: Scheme,
    pub steps_per_year: u32,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            betas: (1..=10).map(|k| 5.0 * k as f64).collect(),
            rho: 0.99,
            sigma_n: 0.035,
            v: 1.0,
            n: 1e9,
            r_b: 0.003,
            a: 0.1,
            b: 0.15,
            w0: 2e6,
            w_crit: 2e5,
            t_reintro: 100,
            tau: 10,
            theta: 4.5,
            sigma_b: 0.01175,
            spread: 0.00015,
            i_b: 0.0,
            lambda_max: 1.0,
            short_selling: true,
            scheme: Scheme::Unregulated,
            steps_per_year: 50,
        }
    }
}

impl SimParams {
    pub fn num_funds(&self) -> usize {
        self.betas.len()
    }

    /// Noise-trader-only market: same parameters with no fund managers.
    pub fn noise_only(&self) -> Self {
        Self {
            betas: Vec::new(),
            ..self.clone()
        }
    }

    pub fn with_scheme(&self, scheme: Scheme, lambda_max: f64) -> Self {
        Self {
            scheme,
            lambda_max,
            ..self.clone()
        }
    }

    /// Stationary mean of the noise trader's log dollar demand.
    pub fn log_vn(&self) -> f64 {
        (self.v * self.n).ln()
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        fn check(ok: bool, field: &'static str, reason: &str) -> Result<(), ParamError> {
            if ok {
                Ok(())
            } else {
                Err(ParamError::Invalid {
                    field,
                    reason: reason.to_string(),
                })
            }
        }

        check(self.rho > 0.0 && self.rho < 1.0, "rho", "must lie in (0, 1)")?;
        check(self.sigma_n >= 0.0 && self.sigma_n.is_finite(), "sigma_n", "must be >= 0")?;
        check(self.v > 0.0 && self.v.is_finite(), "v", "must be positive")?;
        check(self.n > 0.0 && self.n.is_finite(), "n", "must be positive")?;
        check(self.w0 > 0.0 && self.w0.is_finite(), "w0", "must be positive")?;
        check(self.w_crit > 0.0 && self.w_crit.is_finite(), "w_crit", "must be positive")?;
        check(self.a > 0.0 && self.a <= 1.0, "a", "must lie in (0, 1]")?;
        check(self.b >= 0.0 && self.b.is_finite(), "b", "must be >= 0")?;
        check(self.r_b.is_finite(), "r_b", "must be finite")?;
        check(self.tau >= 2, "tau", "must be >= 2")?;
        check(self.theta > 0.0 && self.theta.is_finite(), "theta", "must be positive")?;
        check(self.sigma_b > 0.0 && self.sigma_b.is_finite(), "sigma_b", "must be positive")?;
        check(self.spread >= 0.0 && self.spread.is_finite(), "spread", "must be >= 0")?;
        check(self.i_b.is_finite(), "i_b", "must be finite")?;
        check(
            self.lambda_max >= 1.0 && self.lambda_max.is_finite(),
            "lambda_max",
            "must be >= 1",
        )?;
        check(self.steps_per_year > 0, "steps_per_year", "must be positive")?;
        check(
            self.betas.iter().all(|&b| b > 0.0 && b.is_finite()),
            "betas",
            "must be strictly positive",
        )?;
        let mut sorted = self.betas.clone();
        sorted.sort_by(f64::total_cmp);
        check(
            sorted.windows(2).all(|w| w[0] != w[1]),
            "betas",
            "must be distinct",
        )?;
        Ok(())
    }
}
