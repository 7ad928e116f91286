//! Haircut-based regulation: collateral haircuts, the volatility-adaptive
//! leverage cap they imply, and the fixed loan spread.
//!
//! The unregulated policy is the degenerate case: the cap is always
//! `lambda_max` and borrowing is free.

use crate::params::SimParams;

/// Parameters of the haircut rule, derived from the simulation parameters so
/// that the regulated cap coincides with `lambda_max` at benchmark volatility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasleParams {
    /// Haircut floor, `1 / lambda_max`.
    pub h_min: f64,
    /// Confidence scale, `1 / (lambda_max * sigma_b)`.
    pub phi: f64,
    /// Fixed transaction cost added to the haircut.
    pub c: f64,
    /// Holding period of the collateral in steps.
    pub t_hold: f64,
    pub spread: f64,
    pub i_b: f64,
    pub sigma_b: f64,
}

impl BasleParams {
    pub fn from_sim(params: &SimParams) -> Self {
        Self {
            h_min: 1.0 / params.lambda_max,
            phi: 1.0 / (params.lambda_max * params.sigma_b),
            c: 0.0,
            t_hold: 1.0,
            spread: params.spread,
            i_b: params.i_b,
            sigma_b: params.sigma_b,
        }
    }

    pub fn lambda_max(&self) -> f64 {
        1.0 / self.h_min
    }
}

/// Risk-mitigated exposure of a collateralised loan.
///
/// `loan` is the raw exposure `E`, `collateral` the collateral value `k`.
pub fn net_exposure(loan: f64, collateral: f64, h_e: f64, h_col: f64) -> f64 {
    (loan * (1.0 + h_e) - collateral * (1.0 - h_col)).max(0.0)
}

/// Haircut for historical volatility `sigma`, clamped to `[h_min, 1]`.
///
/// The same rule gives the exposure haircut `H_e` for short positions.
pub fn basle_haircut(sigma: f64, params: &BasleParams) -> f64 {
    (params.phi * sigma * params.t_hold.sqrt() + params.c)
        .max(params.h_min)
        .min(1.0)
}

/// Leverage cap implied by haircuts when the bank lends up to zero net exposure.
pub fn adaptive_lambda_basle(sigma: f64, sigma_b: f64, lambda_max: f64) -> f64 {
    let ratio = if sigma > 0.0 {
        (sigma_b / sigma).min(1.0)
    } else {
        1.0
    };
    (lambda_max * ratio).max(1.0)
}

/// Per-step spread charged on the previous step's loan.
///
/// Long positions financed with borrowed cash (`cash < 0`) pay `cash * spread`;
/// short positions pay `shares * p_prev * spread`. Both are non-positive.
pub fn spread_cost(shares: f64, cash: f64, p_prev: f64, spread: f64) -> f64 {
    if shares < 0.0 {
        shares * p_prev * spread
    } else if cash < 0.0 {
        cash * spread
    } else {
        0.0
    }
}

/// Per-step interest rate on fund loans: benchmark rate plus spread.
pub fn effective_interest_basle(i_b: f64, spread: f64) -> f64 {
    i_b + spread
}
