//! Domain state and the per-step update of the leverage-cycle market.
//!
//! One step runs in a fixed order: noise-trader update, leverage cap from
//! historical volatility, market clearing, wealth/cost/flow settlement, and
//! finally defaults and re-introductions.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::clearing::{self, Bidder, ClearingProblem};
use crate::error::{ClearingFailure, ParamError};
use crate::options::{self, HedgeParams};
use crate::params::{Scheme, SimParams};
use crate::regulation::{self, BasleParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FundStatus {
    Active,
    /// Out of the market; replaced by a fresh fund when the counter reaches zero.
    Defaulted { steps_remaining: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FundState {
    pub beta: f64,
    pub shares: f64,
    pub cash: f64,
    pub wealth: f64,
    pub perf_ema: f64,
    pub status: FundStatus,
    /// Investor flows since the last (re)birth, including the residual paid
    /// out on shutdown.
    pub cum_flows: f64,
    /// Borrowing or hedging costs paid since the last (re)birth (positive).
    pub cum_expenses: f64,
    /// Per-share premium of the option bought with the current position.
    pub premium: f64,
}

impl FundState {
    pub fn newborn(beta: f64, w0: f64) -> Self {
        Self {
            beta,
            shares: 0.0,
            cash: w0,
            wealth: w0,
            perf_ema: 0.0,
            status: FundStatus::Active,
            cum_flows: 0.0,
            cum_expenses: 0.0,
            premium: 0.0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == FundStatus::Active
    }

    pub fn m_crit_long(&self, lambda: f64) -> f64 {
        clearing::m_crit_long(lambda, self.beta)
    }

    pub fn m_crit_short(&self, lambda: f64) -> f64 {
        clearing::m_crit_short(lambda, self.beta)
    }

    /// Leverage at price `p`: position value over wealth for longs, cash
    /// (the asset side of the balance sheet) over wealth for shorts.
    pub fn leverage(&self, p: f64) -> f64 {
        if self.wealth <= 0.0 || !self.is_active() {
            return 0.0;
        }
        if self.shares < 0.0 {
            self.cash / self.wealth
        } else {
            self.shares * p / self.wealth
        }
    }

    /// Replace the share holding at price `p`, keeping wealth fixed.
    pub fn rebalance(&mut self, shares: f64, p: f64) {
        self.shares = shares;
        self.cash = self.wealth - shares * p;
    }

    fn liquidate(&mut self, t_reintro: u32) {
        self.shares = 0.0;
        self.cash = 0.0;
        self.wealth = 0.0;
        self.premium = 0.0;
        self.status = FundStatus::Defaulted {
            steps_remaining: t_reintro,
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseState {
    pub log_xi: f64,
}

impl NoiseState {
    pub fn stationary(params: &SimParams) -> Self {
        Self {
            log_xi: params.log_vn(),
        }
    }

    pub fn xi(&self) -> f64 {
        self.log_xi.exp()
    }
}

/// Advance the noise trader's log dollar demand by one mean-reverting step.
pub fn ou_step(noise: NoiseState, draw: f64, params: &SimParams) -> NoiseState {
    NoiseState {
        log_xi: params.rho * noise.log_xi + params.sigma_n * draw + (1.0 - params.rho) * params.log_vn(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    pub price: f64,
    /// Most recent log-returns, oldest first, at most `tau` long.
    pub return_window: VecDeque<f64>,
    pub t: u64,
    pub sigma_hist: f64,
}

impl MarketState {
    pub fn new(price: f64, params: &SimParams) -> Self {
        Self {
            price,
            return_window: VecDeque::with_capacity(params.tau),
            t: 0,
            sigma_hist: params.sigma_b,
        }
    }

    pub fn mispricing(&self, fundamental: f64) -> f64 {
        fundamental - self.price
    }

    /// Population standard deviation of the last `tau` returns; `sigma_b`
    /// until the window is full.
    pub fn historical_volatility(&self, tau: usize, sigma_b: f64) -> f64 {
        if self.return_window.len() < tau {
            return sigma_b;
        }
        let n = self.return_window.len() as f64;
        let mean = self.return_window.iter().sum::<f64>() / n;
        let var = self.return_window.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        var.sqrt()
    }

    fn record(&mut self, price: f64, tau: usize) -> f64 {
        let r = (price / self.price).ln();
        if self.return_window.len() == tau {
            self.return_window.pop_front();
        }
        self.return_window.push_back(r);
        self.price = price;
        self.t += 1;
        r
    }
}

/// Credit policy applied by the bank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    Unregulated { lambda_max: f64, i_b: f64 },
    Basle(BasleParams),
    PerfectHedge { hedge: HedgeParams, i_b: f64 },
}

impl Policy {
    pub fn from_params(params: &SimParams) -> Self {
        match params.scheme {
            Scheme::Unregulated => Policy::Unregulated {
                lambda_max: params.lambda_max,
                i_b: params.i_b,
            },
            Scheme::Basle => Policy::Basle(BasleParams::from_sim(params)),
            Scheme::PerfectHedge => Policy::PerfectHedge {
                hedge: HedgeParams::from_sim(params),
                i_b: params.i_b,
            },
        }
    }

    pub fn scheme(&self) -> Scheme {
        match self {
            Policy::Unregulated { .. } => Scheme::Unregulated,
            Policy::Basle(_) => Scheme::Basle,
            Policy::PerfectHedge { .. } => Scheme::PerfectHedge,
        }
    }

    pub fn lambda_adapt(&self, sigma: f64, p: f64) -> f64 {
        match self {
            Policy::Unregulated { lambda_max, .. } => *lambda_max,
            Policy::Basle(b) => regulation::adaptive_lambda_basle(sigma, b.sigma_b, b.lambda_max()),
            Policy::PerfectHedge { hedge, .. } => options::adaptive_lambda_hedge(p, sigma, hedge),
        }
    }

    /// Cost charged this step for the position carried from the previous
    /// step. Never positive.
    pub fn cost_term(&self, fund: &FundState, p_prev: f64) -> f64 {
        match self {
            Policy::Unregulated { .. } => 0.0,
            Policy::Basle(b) => regulation::spread_cost(fund.shares, fund.cash, p_prev, b.spread),
            Policy::PerfectHedge { .. } => options::hedge_cost(fund.shares, fund.premium),
        }
    }

    /// Cash the fund would hold after selling everything at `p` and settling
    /// what it owes the bank for the last step.
    pub fn redeemable_cash(&self, fund: &FundState, p: f64, p_prev: f64) -> f64 {
        fund.shares * p + fund.cash + self.cost_term(fund, p_prev)
    }

    /// Per-share premium of the hedge for a freshly entered position.
    pub fn entry_premium(&self, shares: f64, p: f64, leverage: f64, sigma: f64) -> f64 {
        match self {
            Policy::PerfectHedge { hedge, .. } => options::hedge_premium(shares, p, leverage, sigma, hedge),
            _ => 0.0,
        }
    }

    /// Per-step interest rate paid by a fund that holds a loan, `None` without one.
    pub fn effective_rate(&self, fund: &FundState, p: f64, leverage: f64) -> Option<f64> {
        let has_loan = fund.shares < 0.0 || (fund.shares > 0.0 && fund.cash < 0.0);
        match self {
            Policy::Unregulated { i_b, .. } => has_loan.then_some(*i_b),
            Policy::Basle(b) => has_loan.then(|| regulation::effective_interest_basle(b.i_b, b.spread)),
            Policy::PerfectHedge { i_b, .. } => {
                if !has_loan {
                    return None;
                }
                options::effective_spread(fund.shares, p, leverage, fund.premium).map(|s| i_b + s)
            }
        }
    }

    /// Split the shortfall of a fund with negative wealth into the headline
    /// bank loss and unpaid hedging premium.
    pub fn default_loss(&self, wealth: f64, cost: f64) -> (f64, f64) {
        let shortfall = (-wealth).max(0.0);
        match self {
            Policy::PerfectHedge { .. } => (0.0, shortfall.min(-cost)),
            _ => (shortfall, 0.0),
        }
    }
}

/// Investor deposit (positive) or withdrawal (negative) given the performance
/// average and the cash the fund could pay out. Withdrawals never exceed
/// the redeemable cash and nothing moves when it is not positive.
pub fn investor_flow(perf_ema: f64, redeemable: f64, params: &SimParams) -> f64 {
    (params.b * (perf_ema - params.r_b)).max(-1.0) * redeemable.max(0.0)
}

/// Settle last step's position at the new price, adding the investor flow
/// and the policy cost. Shares are unchanged; cash absorbs the rest so that
/// `W = D p + M` holds.
pub fn update_wealth(fund: &FundState, p_prev: f64, p_new: f64, flow: f64, cost: f64) -> FundState {
    let wealth = fund.wealth + fund.shares * (p_new - p_prev) + flow + cost;
    FundState {
        wealth,
        cash: wealth - fund.shares * p_new,
        ..fund.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FundEvent {
    None,
    /// Wealth went negative; the bank absorbs the shortfall.
    Defaulted,
    /// Wealth fell below the survival floor; the remainder goes back to investors.
    ShutDown,
    Reborn,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DefaultOutcome {
    pub bank_loss: f64,
    pub unpaid_premium: f64,
    /// Residual wealth returned to investors on shutdown (negative flow).
    pub residual_flow: f64,
}

/// Apply the insolvency and survival-floor rules to a settled fund and run
/// the re-introduction countdown of a defaulted one.
pub fn handle_default_and_reintro(
    fund: &mut FundState,
    cost: f64,
    policy: &Policy,
    params: &SimParams,
) -> (FundEvent, DefaultOutcome) {
    match fund.status {
        FundStatus::Defaulted { steps_remaining } => {
            if steps_remaining <= 1 {
                *fund = FundState::newborn(fund.beta, params.w0);
                (FundEvent::Reborn, DefaultOutcome::default())
            } else {
                fund.status = FundStatus::Defaulted {
                    steps_remaining: steps_remaining - 1,
                };
                (FundEvent::None, DefaultOutcome::default())
            }
        }
        FundStatus::Active if fund.wealth < 0.0 => {
            let (bank_loss, unpaid_premium) = policy.default_loss(fund.wealth, cost);
            fund.liquidate(params.t_reintro);
            (
                FundEvent::Defaulted,
                DefaultOutcome {
                    bank_loss,
                    unpaid_premium,
                    residual_flow: 0.0,
                },
            )
        }
        FundStatus::Active if fund.wealth < params.w_crit => {
            let residual = fund.wealth;
            fund.cum_flows -= residual;
            fund.liquidate(params.t_reintro);
            (
                FundEvent::ShutDown,
                DefaultOutcome {
                    residual_flow: -residual,
                    ..Default::default()
                },
            )
        }
        FundStatus::Active => (FundEvent::None, DefaultOutcome::default()),
    }
}

/// A fund's position carried into clearing, with wealth marked to the
/// candidate price including that price's investor flow and the policy cost.
#[derive(Debug, Clone, Copy)]
pub struct TradingFund {
    pub beta: f64,
    pub shares: f64,
    pub cash: f64,
    pub wealth_prev: f64,
    pub perf_ema_prev: f64,
    pub p_prev: f64,
    pub cost: f64,
    a: f64,
    b: f64,
    r_b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settlement {
    pub perf_ema: f64,
    pub redeemable: f64,
    pub flow: f64,
    pub wealth: f64,
}

impl TradingFund {
    pub fn new(fund: &FundState, p_prev: f64, cost: f64, params: &SimParams) -> Self {
        Self {
            beta: fund.beta,
            shares: fund.shares,
            cash: fund.cash,
            wealth_prev: fund.wealth,
            perf_ema_prev: fund.perf_ema,
            p_prev,
            cost,
            a: params.a,
            b: params.b,
            r_b: params.r_b,
        }
    }

    pub fn settle(&self, p: f64) -> Settlement {
        let r = self.shares * (p - self.p_prev) / self.wealth_prev;
        let perf_ema = (1.0 - self.a) * self.perf_ema_prev + self.a * r;
        let redeemable = self.shares * p + self.cash + self.cost;
        let flow = (self.b * (perf_ema - self.r_b)).max(-1.0) * redeemable.max(0.0);
        Settlement {
            perf_ema,
            redeemable,
            flow,
            wealth: redeemable + flow,
        }
    }
}

impl Bidder for TradingFund {
    fn beta(&self) -> f64 {
        self.beta
    }

    fn wealth_at(&self, p: f64) -> f64 {
        self.settle(p).wealth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FundReport {
    pub active: bool,
    /// Shares held after the step.
    pub shares: f64,
    pub wealth: f64,
    pub leverage: f64,
    pub flow: f64,
    /// Policy cost term (non-positive).
    pub cost: f64,
    /// Per-step interest rate on an outstanding loan.
    pub effective_rate: Option<f64>,
    pub event: FundEvent,
}

impl FundReport {
    pub fn failed(&self) -> bool {
        matches!(self.event, FundEvent::Defaulted | FundEvent::ShutDown)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub t: u64,
    pub price: f64,
    pub log_return: f64,
    pub mispricing: f64,
    pub sigma: f64,
    pub lambda_adapt: f64,
    pub xi: f64,
    pub clearing_residual: f64,
    pub funds: Vec<FundReport>,
    pub defaults_this_step: u32,
    pub bank_loss_this_step: f64,
    pub unpaid_premium_this_step: f64,
    /// Sum over funds of `|D(t) - D(t-1)|`.
    pub shares_traded: f64,
}

/// One simulation run: market, noise trader, funds, policy and RNG.
#[derive(Debug, Clone)]
pub struct Simulation {
    params: SimParams,
    policy: Policy,
    market: MarketState,
    noise: NoiseState,
    funds: Vec<FundState>,
    rng: ChaCha8Rng,
}

impl Simulation {
    pub fn new(params: SimParams, seed: u64) -> Result<Self, ParamError> {
        params.validate()?;
        let noise = NoiseState::stationary(&params);
        let market = MarketState::new(noise.xi() / params.n, &params);
        let funds = params.betas.iter().map(|&b| FundState::newborn(b, params.w0)).collect();
        Ok(Self {
            policy: Policy::from_params(&params),
            market,
            noise,
            funds,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params,
        })
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn market(&self) -> &MarketState {
        &self.market
    }

    pub fn noise(&self) -> &NoiseState {
        &self.noise
    }

    pub fn funds(&self) -> &[FundState] {
        &self.funds
    }

    pub fn step(&mut self) -> Result<StepReport, ClearingFailure> {
        let params = &self.params;
        let draw: f64 = StandardNormal.sample(&mut self.rng);
        self.noise = ou_step(self.noise, draw, params);
        let xi = self.noise.xi();

        let p_prev = self.market.price;
        let sigma = self.market.historical_volatility(params.tau, params.sigma_b);
        self.market.sigma_hist = sigma;
        let lambda_adapt = self.policy.lambda_adapt(sigma, p_prev);

        let traders: Vec<(usize, TradingFund)> = self
            .funds
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_active())
            .map(|(i, f)| (i, TradingFund::new(f, p_prev, self.policy.cost_term(f, p_prev), params)))
            .collect();
        let views: Vec<TradingFund> = traders.iter().map(|(_, t)| *t).collect();
        let problem = ClearingProblem {
            xi,
            funds: &views,
            lambda_adapt,
            fundamental: params.v,
            supply: params.n,
            short_selling: params.short_selling,
            p_prev,
            tol: clearing::PRICE_TOL,
            step: self.market.t + 1,
        };
        let cleared = problem.clear_price()?;
        let p = cleared.price;
        let log_return = self.market.record(p, params.tau);

        let mut reports: Vec<FundReport> = Vec::with_capacity(self.funds.len());
        let mut trader_iter = traders.iter().peekable();
        let mut defaults = 0;
        let mut bank_loss = 0.0;
        let mut unpaid = 0.0;
        let mut traded = 0.0;
        for (i, fund) in self.funds.iter_mut().enumerate() {
            let view = match trader_iter.peek() {
                Some((j, view)) if *j == i => {
                    trader_iter.next();
                    Some(*view)
                }
                _ => None,
            };
            let Some(view) = view else {
                let (event, _) = handle_default_and_reintro(fund, 0.0, &self.policy, params);
                reports.push(FundReport {
                    active: fund.is_active(),
                    shares: fund.shares,
                    wealth: fund.wealth,
                    leverage: 0.0,
                    flow: 0.0,
                    cost: 0.0,
                    effective_rate: None,
                    event,
                });
                continue;
            };

            let held = fund.shares;
            let s = view.settle(p);
            let mut settled = update_wealth(fund, p_prev, p, s.flow, view.cost);
            settled.perf_ema = s.perf_ema;
            settled.cum_flows += s.flow;
            settled.cum_expenses -= view.cost;
            let demand = problem.demand_of(&view, p);
            settled.rebalance(demand, p);
            *fund = settled;

            let (event, outcome) = handle_default_and_reintro(fund, view.cost, &self.policy, params);
            let mut flow = s.flow;
            let (leverage, effective_rate) = if fund.is_active() {
                let lev = fund.leverage(p);
                fund.premium = self.policy.entry_premium(fund.shares, p, lev, sigma);
                (lev, self.policy.effective_rate(fund, p, lev))
            } else {
                defaults += 1;
                bank_loss += outcome.bank_loss;
                unpaid += outcome.unpaid_premium;
                flow += outcome.residual_flow;
                (0.0, None)
            };
            traded += (fund.shares - held).abs();
            reports.push(FundReport {
                active: fund.is_active(),
                shares: fund.shares,
                wealth: if fund.is_active() { fund.wealth } else { 0.0 },
                leverage,
                flow,
                cost: view.cost,
                effective_rate,
                event,
            });
        }

        Ok(StepReport {
            t: self.market.t,
            price: p,
            log_return,
            mispricing: params.v - p,
            sigma,
            lambda_adapt,
            xi,
            clearing_residual: cleared.residual,
            funds: reports,
            defaults_this_step: defaults,
            bank_loss_this_step: bank_loss,
            unpaid_premium_this_step: unpaid,
            shares_traded: traded,
        })
    }
}
