//! Fund demand and the market-clearing price.
//!
//! Each step the price solves `xi / p + sum_h D_h(p) = N`, where `xi` is the
//! noise trader's dollar demand. Fund demand is piecewise linear in the
//! mispricing with kinks at the leverage cap, so the root is found by
//! bisection on a geometrically expanded bracket.

use crate::error::ClearingFailure;

const BRACKET_FACTOR: f64 = 50.0;
const MAX_EXPANSIONS: usize = 10;
const MAX_ITERATIONS: usize = 400;

/// Relative price tolerance of the bisection.
pub const PRICE_TOL: f64 = 1e-12;
/// Allowed excess demand at the solution, as a fraction of supply.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// Mispricing at which the long side hits the leverage cap.
pub fn m_crit_long(lambda: f64, beta: f64) -> f64 {
    lambda / beta
}

/// Mispricing at or below which the short side hits the cap; zero for `lambda <= 1`.
pub fn m_crit_short(lambda: f64, beta: f64) -> f64 {
    (1.0 - lambda) / beta
}

/// Shares demanded by a value investor with aggression `beta` and wealth
/// `wealth` at price `p`.
///
/// The position value is `beta * m * W` between the kinks and flat at
/// `lambda * W` (long) or `(1 - lambda) * W` (short) beyond them. Shorting
/// needs `lambda > 1`; otherwise overpriced assets are simply not held.
/// Funds without positive wealth demand nothing.
pub fn fund_demand(
    beta: f64,
    wealth: f64,
    p: f64,
    fundamental: f64,
    lambda: f64,
    short_selling: bool,
) -> f64 {
    if wealth <= 0.0 {
        return 0.0;
    }
    let m = fundamental - p;
    let value = if m > m_crit_long(lambda, beta) {
        lambda * wealth
    } else if short_selling && lambda > 1.0 {
        if m <= m_crit_short(lambda, beta) {
            (1.0 - lambda) * wealth
        } else {
            beta * m * wealth
        }
    } else if m < 0.0 {
        0.0
    } else {
        beta * m * wealth
    };
    value / p
}

/// A fund as seen by the clearing problem: its aggression and its wealth
/// marked to a candidate price.
pub trait Bidder {
    fn beta(&self) -> f64;
    fn wealth_at(&self, p: f64) -> f64;
}

/// Carried position marked to market: `W(p) = D p + M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkedPosition {
    pub beta: f64,
    pub shares: f64,
    pub cash: f64,
}

impl Bidder for MarkedPosition {
    fn beta(&self) -> f64 {
        self.beta
    }

    fn wealth_at(&self, p: f64) -> f64 {
        self.shares * p + self.cash
    }
}

#[derive(Debug, Clone)]
pub struct ClearingProblem<'a, B> {
    /// Noise trader dollar demand.
    pub xi: f64,
    pub funds: &'a [B],
    pub lambda_adapt: f64,
    pub fundamental: f64,
    pub supply: f64,
    pub short_selling: bool,
    /// Previous price; the initial bracket is `[p_prev / 50, 50 p_prev]`.
    pub p_prev: f64,
    pub tol: f64,
    /// Step index, for diagnostics only.
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cleared {
    pub price: f64,
    /// Excess demand at `price`, in shares.
    pub residual: f64,
}

impl<B: Bidder> ClearingProblem<'_, B> {
    pub fn demand_of(&self, fund: &B, p: f64) -> f64 {
        fund_demand(
            fund.beta(),
            fund.wealth_at(p),
            p,
            self.fundamental,
            self.lambda_adapt,
            self.short_selling,
        )
    }

    /// Noise demand plus fund demand minus supply, in shares.
    pub fn aggregate_excess_demand(&self, p: f64) -> f64 {
        let funds: f64 = self.funds.iter().map(|f| self.demand_of(f, p)).sum();
        self.xi / p + funds - self.supply
    }

    pub fn clear_price(&self) -> Result<Cleared, ClearingFailure> {
        let excess = |p: f64| self.aggregate_excess_demand(p);
        let mut lo = self.p_prev / BRACKET_FACTOR;
        let mut hi = self.p_prev * BRACKET_FACTOR;
        let mut e_lo = excess(lo);
        let mut e_hi = excess(hi);
        let mut expansions = 0;
        while (e_lo < 0.0 || e_hi > 0.0) && expansions < MAX_EXPANSIONS {
            if e_lo < 0.0 {
                lo /= BRACKET_FACTOR;
                e_lo = excess(lo);
            }
            if e_hi > 0.0 {
                hi *= BRACKET_FACTOR;
                e_hi = excess(hi);
            }
            expansions += 1;
        }
        if e_lo < 0.0 || e_hi > 0.0 || !e_lo.is_finite() || !e_hi.is_finite() {
            return Err(ClearingFailure {
                step: self.step,
                p_prev: self.p_prev,
                xi: self.xi,
                lambda_adapt: self.lambda_adapt,
                p_lo: lo,
                p_hi: hi,
                excess_lo: e_lo,
                excess_hi: e_hi,
            });
        }
        if e_lo == 0.0 {
            return Ok(Cleared { price: lo, residual: 0.0 });
        }
        if e_hi == 0.0 {
            return Ok(Cleared { price: hi, residual: 0.0 });
        }

        let resid_tol = RESIDUAL_TOL * self.supply;
        let mut best = Cleared {
            price: 0.5 * (lo + hi),
            residual: f64::INFINITY,
        };
        for _ in 0..MAX_ITERATIONS {
            let mid = 0.5 * (lo + hi);
            let e = excess(mid);
            if e.abs() < best.residual.abs() || (hi - lo) <= self.tol * mid {
                best = Cleared { price: mid, residual: e };
            }
            if e == 0.0 || ((hi - lo) <= self.tol * mid && e.abs() <= resid_tol) {
                return Ok(Cleared { price: mid, residual: e });
            }
            if e > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn problem(xi: f64, funds: &[MarkedPosition], lambda: f64, short: bool) -> ClearingProblem<'_, MarkedPosition> {
        ClearingProblem {
            xi,
            funds,
            lambda_adapt: lambda,
            fundamental: 1.0,
            supply: 1e9,
            short_selling: short,
            p_prev: 1.0,
            tol: PRICE_TOL,
            step: 0,
        }
    }

    #[test]
    fn demand_examples() {
        // zero mispricing
        assert_eq!(fund_demand(10.0, 2e6, 1.0, 1.0, 5.0, false), 0.0);
        assert_eq!(fund_demand(10.0, 2e6, 1.0, 1.0, 5.0, true), 0.0);
        // linear branch
        let d = fund_demand(10.0, 2e6, 0.98, 1.0, 5.0, false);
        assert_relative_eq!(d, 10.0 * 0.02 * 2e6 / 0.98, max_relative = 1e-12);
        assert_relative_eq!(d, 408_163.265_306_122_4, max_relative = 1e-12);
        // capped long
        assert_relative_eq!(fund_demand(10.0, 2e6, 0.4, 1.0, 5.0, false), 2.5e7, max_relative = 1e-12);
        // capped short
        let d = fund_demand(10.0, 2e6, 1.5, 1.0, 5.0, true);
        assert_relative_eq!(d, -4.0 * 2e6 / 1.5, max_relative = 1e-12);
        assert_relative_eq!(d, -5.333_333e6, max_relative = 1e-6);
        // long-only ignores overpricing
        assert_eq!(fund_demand(10.0, 2e6, 1.5, 1.0, 5.0, false), 0.0);
        // lambda = 1 disables shorting
        assert_eq!(fund_demand(10.0, 2e6, 1.5, 1.0, 1.0, true), 0.0);
        // insolvent funds sit out
        assert_eq!(fund_demand(10.0, -1.0, 0.5, 1.0, 5.0, true), 0.0);
        assert_eq!(fund_demand(10.0, 0.0, 0.5, 1.0, 5.0, true), 0.0);
    }

    #[test]
    fn demand_continuous_at_kinks() {
        let (beta, w, lam) = (10.0, 2e6, 5.0);
        let eps = 1e-9;
        for m in [m_crit_long(lam, beta), m_crit_short(lam, beta), 0.0] {
            let p = 1.0 - m;
            let a = fund_demand(beta, w, p - eps, 1.0, lam, true);
            let b = fund_demand(beta, w, p + eps, 1.0, lam, true);
            assert!((a - b).abs() < 1e-6 * w, "kink at m={m}: {a} vs {b}");
        }
        let p = 1.0 - m_crit_long(lam, beta);
        let a = fund_demand(beta, w, p - eps, 1.0, lam, false);
        let b = fund_demand(beta, w, p + eps, 1.0, lam, false);
        assert!((a - b).abs() < 1e-6 * w);
    }

    #[test]
    fn noise_only_excess() {
        let pr = problem(9.5e8, &[], 1.0, false);
        assert_eq!(pr.aggregate_excess_demand(0.95), 0.0);
        assert!(pr.aggregate_excess_demand(0.9) > 0.0);
        let c = pr.clear_price().unwrap();
        assert_relative_eq!(c.price, 0.95, max_relative = 1e-10);
        assert!(c.residual.abs() <= 1e-8 * 1e9);
    }

    #[test]
    fn single_linear_fund_closed_form() {
        let funds = [MarkedPosition { beta: 10.0, shares: 0.0, cash: 2e6 }];
        let pr = problem(9.5e8, &funds, 5.0, false);
        let expected = (9.5e8 + 10.0 * 1.0 * 2e6) / (1e9 + 10.0 * 2e6);
        assert_relative_eq!(expected, 0.950_980_392_156_862_7, max_relative = 1e-15);
        assert_eq!(pr.aggregate_excess_demand(expected).abs() < 1e-6, true);
        let c = pr.clear_price().unwrap();
        assert_relative_eq!(c.price, expected, max_relative = 1e-10);
        // linear branch is self-consistent
        assert!(1.0 - c.price < m_crit_long(5.0, 10.0));
    }

    #[test]
    fn far_bracket_is_expanded() {
        let pr = ClearingProblem { p_prev: 1e-6, ..problem(9.5e8, &[], 1.0, false) };
        let c = pr.clear_price().unwrap();
        assert_relative_eq!(c.price, 0.95, max_relative = 1e-10);
    }

    #[test]
    fn degenerate_configuration_fails() {
        // price beyond any bracket reachable in ten expansions
        let pr = ClearingProblem { p_prev: 1e-40, ..problem(9.5e8, &[], 1.0, false) };
        let err = pr.clear_price().unwrap_err();
        assert!(err.excess_hi > 0.0);
    }

    #[test]
    fn monotone_on_grid_for_unleveraged_long_only() {
        let funds: Vec<_> = (1..=10)
            .map(|k| MarkedPosition { beta: 5.0 * k as f64, shares: 1e6 * k as f64, cash: 5e5 })
            .collect();
        let pr = problem(9.0e8, &funds, 10.0, false);
        let c = pr.clear_price().unwrap();
        let (lo, hi) = (c.price / 50.0, c.price * 50.0);
        let mut prev = f64::INFINITY;
        for i in 0..100 {
            let p = lo + (hi - lo) * i as f64 / 99.0;
            let e = pr.aggregate_excess_demand(p);
            assert!(e <= prev, "not monotone at {p}");
            prev = e;
        }
    }

    proptest::proptest! {
        #[test]
        fn residual_contract(
            xi in 1e8f64..5e9,
            lam in 1.0f64..20.0,
            short in proptest::bool::ANY,
            shares in proptest::collection::vec(-3e6f64..3e7, 10),
        ) {
            let funds: Vec<_> = shares
                .iter()
                .enumerate()
                .map(|(k, &d)| MarkedPosition { beta: 5.0 * (k + 1) as f64, shares: d, cash: 2e6 - d * 0.9 })
                .collect();
            let pr = ClearingProblem { p_prev: 0.9, ..problem(xi, &funds, lam, short) };
            let c = pr.clear_price().unwrap();
            proptest::prop_assert!(c.price > 0.0);
            proptest::prop_assert!(pr.aggregate_excess_demand(c.price).abs() <= 1e-8 * 1e9);
        }
    }
}
