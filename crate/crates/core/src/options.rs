//! Option-hedged lending: strikes that guarantee loan repayment, zero-rate
//! Black-Scholes premiums, hedging-cost wealth terms, effective spreads and
//! the leverage cap implied by a ceiling on hedging cost.

use std::f64::consts::SQRT_2;

use thiserror::Error;

use crate::params::SimParams;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum HedgeError {
    #[error("call strike needs leverage > 1, got {0}")]
    CallLeverage(f64),
    #[error("put strike needs leverage >= 1, got {0}")]
    PutLeverage(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptionKind {
    Put,
    Call,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HedgeParams {
    pub theta: f64,
    pub sigma_b: f64,
    pub lambda_max: f64,
    /// Option maturity in steps.
    pub t_opt: f64,
    /// Also cap leverage by the call-premium ceiling of short positions.
    pub short_side: bool,
}

impl HedgeParams {
    pub fn from_sim(params: &SimParams) -> Self {
        Self {
            theta: params.theta,
            sigma_b: params.sigma_b,
            lambda_max: params.lambda_max,
            t_opt: 1.0,
            short_side: params.short_selling,
        }
    }
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Put strike at which the collateral exactly repays a loan taken at leverage `lambda`.
pub fn put_strike(p: f64, lambda: f64) -> Result<f64, HedgeError> {
    if lambda < 1.0 || lambda.is_nan() {
        return Err(HedgeError::PutLeverage(lambda));
    }
    Ok(p * (1.0 - 1.0 / lambda))
}

/// Call strike at which the cash collateral exactly covers buying back a short.
pub fn call_strike(p: f64, lambda: f64) -> Result<f64, HedgeError> {
    if lambda <= 1.0 || lambda.is_nan() {
        return Err(HedgeError::CallLeverage(lambda));
    }
    Ok(p * (1.0 + 1.0 / (lambda - 1.0)))
}

pub fn hedge_strikes(kind: OptionKind, p: f64, lambda: f64) -> Result<f64, HedgeError> {
    match kind {
        OptionKind::Put => put_strike(p, lambda),
        OptionKind::Call => call_strike(p, lambda),
    }
}

/// Black-Scholes premium with zero interest rate.
///
/// Zero volatility or maturity collapses to intrinsic value; an infinite call
/// strike is worthless.
pub fn bs_price(kind: OptionKind, spot: f64, strike: f64, sigma_eff: f64, t_opt: f64) -> f64 {
    let s = sigma_eff * t_opt.sqrt();
    if strike <= 0.0 {
        return match kind {
            OptionKind::Put => 0.0,
            OptionKind::Call => spot,
        };
    }
    if strike.is_infinite() {
        return match kind {
            OptionKind::Put => f64::INFINITY,
            OptionKind::Call => 0.0,
        };
    }
    if s <= 0.0 {
        return match kind {
            OptionKind::Put => (strike - spot).max(0.0),
            OptionKind::Call => (spot - strike).max(0.0),
        };
    }
    let d1 = ((spot / strike).ln() + 0.5 * s * s) / s;
    let d2 = d1 - s;
    let value = match kind {
        OptionKind::Put => strike * norm_cdf(-d2) - spot * norm_cdf(-d1),
        OptionKind::Call => spot * norm_cdf(d1) - strike * norm_cdf(d2),
    };
    value.max(0.0)
}

/// Premium per share of the hedge a position at leverage `lambda` must carry.
///
/// Longs buy a put struck at [`put_strike`], shorts a call struck at
/// [`call_strike`]. Unleveraged longs and empty positions need no hedge.
pub fn hedge_premium(shares: f64, p: f64, lambda: f64, sigma: f64, params: &HedgeParams) -> f64 {
    let sigma_eff = params.theta * sigma;
    if shares > 0.0 && lambda > 1.0 {
        let k = p * (1.0 - 1.0 / lambda);
        bs_price(OptionKind::Put, p, k, sigma_eff, params.t_opt)
    } else if shares < 0.0 && lambda > 1.0 {
        let k = p * (1.0 + 1.0 / (lambda - 1.0));
        bs_price(OptionKind::Call, p, k, sigma_eff, params.t_opt)
    } else {
        0.0
    }
}

/// Wealth term for the hedge bought last step: `-D P` for a long, `+D C` for a
/// short (`D < 0`). Never positive.
pub fn hedge_cost(shares: f64, premium: f64) -> f64 {
    if shares > 0.0 {
        -shares * premium
    } else if shares < 0.0 {
        shares * premium
    } else {
        0.0
    }
}

/// Hedging premium expressed as a per-step interest rate on the loan.
///
/// Returns `None` for a long without a loan (`lambda <= 1`).
pub fn effective_spread(shares: f64, p: f64, lambda: f64, premium: f64) -> Option<f64> {
    if shares > 0.0 {
        (lambda > 1.0).then(|| premium / (p * (1.0 - 1.0 / lambda)))
    } else if shares < 0.0 {
        Some(premium / p)
    } else {
        None
    }
}

/// Unit-spot premium as a function of leverage for one side of the book.
fn unit_premium(kind: OptionKind, lambda: f64, sigma_eff: f64, t_opt: f64) -> f64 {
    let strike = match kind {
        OptionKind::Put => 1.0 - 1.0 / lambda,
        OptionKind::Call if lambda <= 1.0 => f64::INFINITY,
        OptionKind::Call => 1.0 + 1.0 / (lambda - 1.0),
    };
    bs_price(kind, 1.0, strike, sigma_eff, t_opt)
}

/// Largest leverage whose hedge premium at volatility `sigma` does not exceed
/// the premium of a `lambda_max` position at benchmark volatility.
///
/// The strike scales with spot, so the solution is independent of `p`; the
/// premium residual at the returned leverage is below `1e-10 * p` whenever
/// the result is interior.
pub fn hedge_cap(kind: OptionKind, sigma: f64, params: &HedgeParams) -> f64 {
    let lambda_max = params.lambda_max;
    if lambda_max <= 1.0 {
        return 1.0;
    }
    let ceiling = unit_premium(kind, lambda_max, params.theta * params.sigma_b, params.t_opt);
    if ceiling <= 0.0 {
        return lambda_max;
    }
    let sigma_eff = params.theta * sigma;
    let excess = |lambda: f64| unit_premium(kind, lambda, sigma_eff, params.t_opt) - ceiling;

    // Premium increases with leverage, so a solution at or beyond lambda_max
    // means the static cap binds and no search is needed.
    if excess(lambda_max) <= 0.0 {
        return lambda_max;
    }
    let (mut lo, mut hi) = (1.0, lambda_max);
    let tol = 1e-11;
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let f = excess(mid);
        if f.abs() <= tol || hi - lo <= 1e-14 * hi {
            break;
        }
        if f > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    mid.clamp(1.0, lambda_max)
}

/// Leverage cap of the option-hedge policy at historical volatility `sigma`.
///
/// The binding cap is the tighter of the put-side and (when shorting is
/// allowed) call-side solutions, never above `lambda_max` nor below 1.
pub fn adaptive_lambda_hedge(_p: f64, sigma: f64, params: &HedgeParams) -> f64 {
    let long = hedge_cap(OptionKind::Put, sigma, params);
    if params.short_side {
        long.min(hedge_cap(OptionKind::Call, sigma, params))
    } else {
        long
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hp(lambda_max: f64) -> HedgeParams {
        HedgeParams::from_sim(&SimParams {
            lambda_max,
            ..Default::default()
        })
    }

    /// Discounted lognormal put payoff by composite Simpson quadrature in z.
    fn put_by_quadrature(spot: f64, strike: f64, s: f64) -> f64 {
        let n = 20_000;
        let (a, b) = (-12.0f64, 12.0f64);
        let h = (b - a) / n as f64;
        let f = |z: f64| {
            let st = spot * (-0.5 * s * s + s * z).exp();
            (strike - st).max(0.0) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
        };
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn strikes() {
        assert_eq!(put_strike(1.0, 1.0).unwrap(), 0.0);
        assert_relative_eq!(put_strike(1.0, 2.0).unwrap(), 0.5);
        assert_relative_eq!(call_strike(1.0, 2.0).unwrap(), 2.0);
        assert!(call_strike(1.0, 1.0).is_err());
        assert!(put_strike(1.0, 0.5).is_err());
        assert_eq!(
            hedge_strikes(OptionKind::Call, 1.0, 1.0),
            Err(HedgeError::CallLeverage(1.0))
        );
    }

    #[test]
    fn bs_degenerate_cases() {
        assert_eq!(bs_price(OptionKind::Put, 1.0, 0.0, 0.3, 1.0), 0.0);
        assert_eq!(bs_price(OptionKind::Put, 1.0, 0.9, 0.0, 1.0), 0.0);
        assert_relative_eq!(bs_price(OptionKind::Call, 1.0, 0.9, 0.0, 1.0), 0.1, epsilon = 1e-15);
        assert_relative_eq!(bs_price(OptionKind::Put, 1.0, 1.2, 0.0, 1.0), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn bs_put_matches_quadrature() {
        let oracle = put_by_quadrature(1.0, 0.9, 0.2);
        // frozen from the quadrature oracle
        assert_relative_eq!(oracle, 0.035_891_08, epsilon = 1e-7);
        let bs = bs_price(OptionKind::Put, 1.0, 0.9, 0.2, 1.0);
        assert_relative_eq!(bs, oracle, epsilon = 1e-7);
        let call = bs_price(OptionKind::Call, 1.0, 0.9, 0.2, 1.0);
        assert_relative_eq!(call - bs, 1.0 - 0.9, epsilon = 1e-12);
    }

    #[test]
    fn costs_and_spreads() {
        assert_eq!(hedge_cost(0.0, 0.01), 0.0);
        assert_relative_eq!(hedge_cost(1e6, 0.001), -1000.0);
        assert_relative_eq!(hedge_cost(-1e6, 0.001), -1000.0);
        // unleveraged long hedges for free
        let params = hp(10.0);
        assert_eq!(hedge_premium(1e6, 1.0, 1.0, 0.02, &params), 0.0);
        assert_eq!(effective_spread(-1e6, 1.0, 3.0, 0.0), Some(0.0));
        assert_relative_eq!(effective_spread(1e6, 1.0, 2.0, 0.005).unwrap(), 0.01);
        assert_relative_eq!(effective_spread(1e6, 1.0, 2.0, 0.010).unwrap(), 0.02);
        assert_eq!(effective_spread(1e6, 1.0, 1.0, 0.0), None);
    }

    #[test]
    fn cap_is_lambda_max_at_or_below_benchmark_vol() {
        for lm in [1.0, 2.0, 5.0, 10.0, 15.0, 20.0] {
            let p = hp(lm);
            for sigma in [0.0, 0.005, 0.01, 0.01175] {
                let cap = adaptive_lambda_hedge(1.0, sigma, &p);
                assert_relative_eq!(cap, lm, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn cap_shrinks_at_double_vol_and_solves_residual() {
        for lm in [2.0, 5.0, 10.0, 15.0, 20.0] {
            let params = hp(lm);
            let sigma = 2.0 * params.sigma_b;
            for kind in [OptionKind::Put, OptionKind::Call] {
                let cap = hedge_cap(kind, sigma, &params);
                assert!(cap < lm && cap >= 1.0, "{kind:?} lm={lm} cap={cap}");
                for p in [0.5, 1.0, 1.7] {
                    let ceiling = p * unit_premium(kind, lm, params.theta * params.sigma_b, 1.0);
                    let strike = hedge_strikes(kind, p, cap).unwrap();
                    let prem = bs_price(kind, p, strike, params.theta * sigma, 1.0);
                    assert!((prem - ceiling).abs() <= 1e-10 * p, "residual {}", prem - ceiling);
                }
            }
        }
    }

    #[test]
    fn put_side_is_binding_for_long_only() {
        let mut params = hp(10.0);
        params.short_side = false;
        let s = 3.0 * params.sigma_b;
        assert_eq!(adaptive_lambda_hedge(1.0, s, &params), hedge_cap(OptionKind::Put, s, &params));
    }

    proptest::proptest! {
        #[test]
        fn put_call_parity(spot in 0.05f64..5.0, kfrac in 0.0f64..3.0, s in 0.0f64..2.0) {
            let k = spot * kfrac;
            let put = bs_price(OptionKind::Put, spot, k, s, 1.0);
            let call = bs_price(OptionKind::Call, spot, k, s, 1.0);
            let scale = spot.max(k);
            proptest::prop_assert!(((call - put) - (spot - k)).abs() <= 1e-12 * scale);
        }

        #[test]
        fn put_increasing_in_leverage(l1 in 1.0f64..50.0, dl in 0.01f64..20.0, s in 0.01f64..0.5) {
            let a = unit_premium(OptionKind::Put, l1, s, 1.0);
            let b = unit_premium(OptionKind::Put, l1 + dl, s, 1.0);
            proptest::prop_assert!(b >= a);
            let c = unit_premium(OptionKind::Call, l1, s, 1.0);
            let d = unit_premium(OptionKind::Call, l1 + dl, s, 1.0);
            proptest::prop_assert!(d >= c);
        }

        #[test]
        fn cap_monotone_in_sigma(s1 in 0.0f64..0.2, s2 in 0.0f64..0.2, lm in 1.0f64..20.0) {
            let params = hp(lm);
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let c_lo = adaptive_lambda_hedge(1.0, lo, &params);
            let c_hi = adaptive_lambda_hedge(1.0, hi, &params);
            proptest::prop_assert!(c_hi <= c_lo + 1e-9);
            proptest::prop_assert!(c_hi >= 1.0 && c_lo <= lm);
        }
    }

    #[test]
    fn put_strictly_increasing_on_grid() {
        let s = 4.5 * 0.02;
        let mut prev = 0.0;
        for i in 1..=200 {
            let lam = 1.0 + 0.1 * i as f64;
            let prem = unit_premium(OptionKind::Put, lam, s, 1.0);
            assert!(prem > prev, "lambda {lam}");
            prev = prem;
        }
    }
}
