//! Run-level indicators: volatility, volume, leverage, failure rates,
//! investor returns net of flows, hypothetical manager fees, bank losses and
//! the cost of credit.
//!
//! Per-step rates and frequencies are annualised with `steps_per_year`.
//! Investor returns and manager fees are measured over windows that start at
//! a fund's (re)birth or at a fee-year boundary (fixed `steps_per_year`
//! blocks from the start of the run) and end at the next boundary, at the
//! fund's failure, or at the end of the run.

use serde::{Deserialize, Serialize};

use crate::params::SimParams;
use crate::sim::{FundEvent, StepReport};
use crate::stats::{Histogram, Moments};

const MANAGEMENT_FEE: f64 = 0.02;
const PERFORMANCE_FEE: f64 = 0.20;

/// Accounting record of one fund over one measurement window.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FundWindow {
    pub start_wealth: f64,
    /// Wealth at the end of the window; ignored when `failed`.
    pub end_wealth: f64,
    /// Net investor flows inside the window, including any shutdown payout.
    pub flows: f64,
    /// Borrowing or hedging costs paid inside the window (positive).
    pub expenses: f64,
    /// Sum over steps of assets under management `|D| p`.
    pub aum_sum: f64,
    pub steps: u32,
    pub failed: bool,
}

impl FundWindow {
    fn open(start_wealth: f64) -> Self {
        Self {
            start_wealth,
            end_wealth: start_wealth,
            ..Default::default()
        }
    }
}

/// Return to investors over a window after removing their own deposits and
/// withdrawals and adding back the fund's expenses. A failed fund ends the
/// window with zero wealth.
pub fn adjusted_return(window: &FundWindow) -> f64 {
    let end = if window.failed { 0.0 } else { window.end_wealth };
    (end - window.flows + window.expenses) / window.start_wealth - 1.0
}

/// Hypothetical fee income of a fund manager for one fee-year window: a
/// management fee on average assets (pro rata for partial years) plus a
/// performance fee on positive adjusted returns. Nothing is paid in a year
/// the fund fails.
pub fn manager_profit(window: &FundWindow, steps_per_year: u32) -> f64 {
    if window.failed {
        return 0.0;
    }
    let management = MANAGEMENT_FEE * window.aum_sum / steps_per_year as f64;
    let performance = PERFORMANCE_FEE * adjusted_return(window).max(0.0) * window.start_wealth;
    management + performance
}

/// Aggregated indicators of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunMetrics {
    /// Standard deviation of all log-returns of the run.
    pub volatility_index: f64,
    pub return_skew: f64,
    pub return_excess_kurtosis: f64,
    /// Shares traded per fund per step.
    pub avg_volume: f64,
    /// Leverage averaged over funds and steps (failed funds count as 0).
    pub avg_leverage: f64,
    pub mean_lambda_adapt: f64,
    /// Failures per fund per year, averaged over all funds.
    pub default_prob_annual: f64,
    /// Failures per year of the most aggressive fund.
    pub default_prob_annual_top: f64,
    /// Mean adjusted return of the most aggressive fund over fee-year windows.
    pub r_adj_annual_top: f64,
    /// Mean adjusted return of the most aggressive fund over birth-to-failure windows.
    pub r_adj_lifetime_top: f64,
    /// Mean yearly fee income of the most aggressive fund's manager.
    pub manager_profit_top: f64,
    pub bank_losses_annual: f64,
    /// Hedging premiums left unpaid by failed funds, per year.
    pub unpaid_premiums_annual: f64,
    /// Mean per-step loan rate over fund-steps with a loan, annualised.
    pub effective_interest_annual: f64,
    pub max_clearing_residual: f64,
    pub max_leverage_excess: f64,
}

impl RunMetrics {
    /// Column names, in table order.
    pub const FIELDS: [&'static str; 16] = [
        "volatility_index",
        "return_skew",
        "return_excess_kurtosis",
        "avg_volume",
        "avg_leverage",
        "mean_lambda_adapt",
        "default_prob_annual",
        "default_prob_annual_top",
        "r_adj_annual_top",
        "r_adj_lifetime_top",
        "manager_profit_top",
        "bank_losses_annual",
        "unpaid_premiums_annual",
        "effective_interest_annual",
        "max_clearing_residual",
        "max_leverage_excess",
    ];

    pub fn values(&self) -> [f64; 16] {
        [
            self.volatility_index,
            self.return_skew,
            self.return_excess_kurtosis,
            self.avg_volume,
            self.avg_leverage,
            self.mean_lambda_adapt,
            self.default_prob_annual,
            self.default_prob_annual_top,
            self.r_adj_annual_top,
            self.r_adj_lifetime_top,
            self.manager_profit_top,
            self.bank_losses_annual,
            self.unpaid_premiums_annual,
            self.effective_interest_annual,
            self.max_clearing_residual,
            self.max_leverage_excess,
        ]
    }

    pub fn from_values(v: &[f64]) -> Option<Self> {
        if v.len() != Self::FIELDS.len() {
            return None;
        }
        Some(Self {
            volatility_index: v[0],
            return_skew: v[1],
            return_excess_kurtosis: v[2],
            avg_volume: v[3],
            avg_leverage: v[4],
            mean_lambda_adapt: v[5],
            default_prob_annual: v[6],
            default_prob_annual_top: v[7],
            r_adj_annual_top: v[8],
            r_adj_lifetime_top: v[9],
            manager_profit_top: v[10],
            bank_losses_annual: v[11],
            unpaid_premiums_annual: v[12],
            effective_interest_annual: v[13],
            max_clearing_residual: v[14],
            max_leverage_excess: v[15],
        })
    }

    pub fn field(&self, name: &str) -> Option<f64> {
        Self::FIELDS
            .iter()
            .position(|f| *f == name)
            .map(|i| self.values()[i])
    }
}

/// Everything a finished run hands back besides the optional step trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub metrics: RunMetrics,
    pub histogram: Histogram,
    pub returns: Vec<f64>,
    pub total_bank_loss: f64,
    pub failures_per_fund: Vec<u32>,
}

#[derive(Debug, Clone)]
struct FundTrack {
    year: Option<FundWindow>,
    life: Option<FundWindow>,
    years: Vec<FundWindow>,
    lives: Vec<FundWindow>,
    failures: u32,
}

/// Streams step reports of one run into [`RunMetrics`].
#[derive(Debug, Clone)]
pub struct MetricsCollector {
    steps_per_year: u32,
    top: Option<usize>,
    tracks: Vec<FundTrack>,
    returns: Vec<f64>,
    steps: u64,
    traded: f64,
    leverage_sum: f64,
    lambda_sum: f64,
    bank_loss: f64,
    unpaid: f64,
    rate_sum: f64,
    rate_count: u64,
    max_residual: f64,
    max_lev_excess: f64,
}

impl MetricsCollector {
    pub fn new(params: &SimParams) -> Self {
        let top = params
            .betas
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i);
        let tracks = params
            .betas
            .iter()
            .map(|_| FundTrack {
                year: Some(FundWindow::open(params.w0)),
                life: Some(FundWindow::open(params.w0)),
                years: Vec::new(),
                lives: Vec::new(),
                failures: 0,
            })
            .collect();
        Self {
            steps_per_year: params.steps_per_year,
            top,
            tracks,
            returns: Vec::new(),
            steps: 0,
            traded: 0.0,
            leverage_sum: 0.0,
            lambda_sum: 0.0,
            bank_loss: 0.0,
            unpaid: 0.0,
            rate_sum: 0.0,
            rate_count: 0,
            max_residual: 0.0,
            max_lev_excess: f64::NEG_INFINITY,
        }
    }

    pub fn observe(&mut self, report: &StepReport) {
        self.steps += 1;
        self.returns.push(report.log_return);
        self.traded += report.shares_traded;
        self.lambda_sum += report.lambda_adapt;
        self.bank_loss += report.bank_loss_this_step;
        self.unpaid += report.unpaid_premium_this_step;
        self.max_residual = self.max_residual.max(report.clearing_residual.abs());

        for (track, fund) in self.tracks.iter_mut().zip(&report.funds) {
            self.leverage_sum += fund.leverage;
            if fund.active {
                self.max_lev_excess = self.max_lev_excess.max(fund.leverage - report.lambda_adapt);
            }
            if let Some(rate) = fund.effective_rate {
                self.rate_sum += rate;
                self.rate_count += 1;
            }
            match fund.event {
                FundEvent::Reborn => {
                    track.year = Some(FundWindow::open(fund.wealth));
                    track.life = Some(FundWindow::open(fund.wealth));
                    continue;
                }
                FundEvent::None if !fund.active => continue,
                _ => {}
            }
            let aum = fund.shares.abs() * report.price;
            for w in [track.year.as_mut(), track.life.as_mut()].into_iter().flatten() {
                w.flows += fund.flow;
                w.expenses -= fund.cost;
                w.aum_sum += aum;
                w.steps += 1;
                w.end_wealth = fund.wealth;
            }
            if fund.failed() {
                track.failures += 1;
                for (slot, done) in [(&mut track.year, &mut track.years), (&mut track.life, &mut track.lives)] {
                    if let Some(mut w) = slot.take() {
                        w.failed = true;
                        w.end_wealth = 0.0;
                        done.push(w);
                    }
                }
            }
        }

        if self.steps % self.steps_per_year as u64 == 0 {
            for (track, fund) in self.tracks.iter_mut().zip(&report.funds) {
                if let Some(w) = track.year.take() {
                    if w.steps > 0 {
                        track.years.push(w);
                    }
                }
                if fund.active {
                    track.year = Some(FundWindow::open(fund.wealth));
                }
            }
        }
    }

    pub fn finish(mut self) -> RunSummary {
        for track in &mut self.tracks {
            if let Some(w) = track.year.take() {
                if w.steps > 0 {
                    track.years.push(w);
                }
            }
            if let Some(w) = track.life.take() {
                if w.steps > 0 {
                    track.lives.push(w);
                }
            }
        }

        let steps = self.steps.max(1) as f64;
        let per_year = self.steps_per_year as f64 / steps;
        let h = self.tracks.len();
        let fund_steps = (h as f64 * steps).max(1.0);
        let moments = Moments::of(&self.returns);
        let failures: Vec<u32> = self.tracks.iter().map(|t| t.failures).collect();
        let total_failures: u32 = failures.iter().sum();

        let (top_failures, r_adj_annual, r_adj_life, profit) = match self.top {
            Some(i) => {
                let t = &self.tracks[i];
                let mean_of = |ws: &[FundWindow], f: &dyn Fn(&FundWindow) -> f64| {
                    if ws.is_empty() {
                        0.0
                    } else {
                        ws.iter().map(f).sum::<f64>() / ws.len() as f64
                    }
                };
                let spy = self.steps_per_year;
                (
                    t.failures,
                    mean_of(&t.years, &adjusted_return),
                    mean_of(&t.lives, &adjusted_return),
                    mean_of(&t.years, &|w| manager_profit(w, spy)),
                )
            }
            None => (0, 0.0, 0.0, 0.0),
        };

        let metrics = RunMetrics {
            volatility_index: moments.std_dev,
            return_skew: moments.skew,
            return_excess_kurtosis: moments.excess_kurtosis,
            avg_volume: if h == 0 { 0.0 } else { self.traded / fund_steps },
            avg_leverage: if h == 0 { 0.0 } else { self.leverage_sum / fund_steps },
            mean_lambda_adapt: self.lambda_sum / steps,
            default_prob_annual: if h == 0 { 0.0 } else { total_failures as f64 / h as f64 * per_year },
            default_prob_annual_top: top_failures as f64 * per_year,
            r_adj_annual_top: r_adj_annual,
            r_adj_lifetime_top: r_adj_life,
            manager_profit_top: profit,
            bank_losses_annual: self.bank_loss * per_year,
            unpaid_premiums_annual: self.unpaid * per_year,
            effective_interest_annual: if self.rate_count == 0 {
                0.0
            } else {
                self.rate_sum / self.rate_count as f64 * self.steps_per_year as f64
            },
            max_clearing_residual: self.max_residual,
            max_leverage_excess: if self.max_lev_excess.is_finite() { self.max_lev_excess } else { 0.0 },
        };
        RunSummary {
            histogram: Histogram::from_samples(&self.returns, Histogram::DEFAULT_BINS),
            returns: self.returns,
            total_bank_loss: self.bank_loss,
            failures_per_fund: failures,
            metrics,
        }
    }
}

/// Compute run metrics from a complete sequence of step reports.
pub fn run_metrics(reports: &[StepReport], params: &SimParams) -> RunSummary {
    let mut c = MetricsCollector::new(params);
    for r in reports {
        c.observe(r);
    }
    c.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::FundReport;
    use approx::assert_relative_eq;

    #[test]
    fn adjusted_return_examples() {
        let doubled = FundWindow { start_wealth: 2e6, end_wealth: 4e6, ..Default::default() };
        assert_relative_eq!(adjusted_return(&doubled), 1.0);
        let dead = FundWindow { start_wealth: 2e6, end_wealth: 7e5, failed: true, ..Default::default() };
        assert_eq!(adjusted_return(&dead), -1.0);
        let w = FundWindow {
            start_wealth: 2e6,
            end_wealth: 2.2e6,
            flows: 1e5,
            expenses: 2e4,
            ..Default::default()
        };
        assert_relative_eq!(adjusted_return(&w), 0.06, epsilon = 1e-12);
    }

    #[test]
    fn manager_profit_examples() {
        let flat = FundWindow { start_wealth: 2e6, end_wealth: 2e6, aum_sum: 1e6 * 50.0, steps: 50, ..Default::default() };
        assert_relative_eq!(manager_profit(&flat, 50), 2e4, max_relative = 1e-12);
        let failed = FundWindow { failed: true, ..flat };
        assert_eq!(manager_profit(&failed, 50), 0.0);
        let good = FundWindow { end_wealth: 2.2e6, ..flat };
        assert_relative_eq!(manager_profit(&good, 50), 6e4, max_relative = 1e-12);
    }

    fn report(t: u64, price: f64, funds: Vec<FundReport>) -> StepReport {
        StepReport {
            t,
            price,
            log_return: 0.0,
            mispricing: 1.0 - price,
            sigma: 0.0,
            lambda_adapt: 1.0,
            xi: price * 1e9,
            clearing_residual: 0.0,
            funds,
            defaults_this_step: 0,
            bank_loss_this_step: 0.0,
            unpaid_premium_this_step: 0.0,
            shares_traded: 0.0,
        }
    }

    fn idle_fund(wealth: f64) -> FundReport {
        FundReport {
            active: true,
            shares: 0.0,
            wealth,
            leverage: 0.0,
            flow: 0.0,
            cost: 0.0,
            effective_rate: None,
            event: FundEvent::None,
        }
    }

    #[test]
    fn constant_price_idle_run() {
        let params = SimParams { betas: vec![5.0, 50.0], ..Default::default() };
        let reports: Vec<_> = (1..=120).map(|t| report(t, 1.0, vec![idle_fund(2e6), idle_fund(2e6)])).collect();
        let s = run_metrics(&reports, &params);
        assert_eq!(s.metrics.volatility_index, 0.0);
        assert_eq!(s.metrics.avg_volume, 0.0);
        assert_eq!(s.metrics.r_adj_annual_top, 0.0);
        assert_eq!(s.metrics.r_adj_lifetime_top, 0.0);
        assert_eq!(s.metrics.default_prob_annual, 0.0);
        assert_eq!(s.metrics.effective_interest_annual, 0.0);
        assert_relative_eq!(s.histogram.mass().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn default_frequency_is_annualised() {
        let params = SimParams { betas: vec![50.0], ..Default::default() };
        let steps = 50_000;
        let mut c = MetricsCollector::new(&params);
        for t in 1..=steps {
            let mut f = idle_fund(2e6);
            if t == 1000 || t == 30_000 {
                f.event = FundEvent::Defaulted;
                f.active = false;
                f.wealth = 0.0;
            }
            c.observe(&report(t, 1.0, vec![f]));
        }
        let s = c.finish();
        assert_relative_eq!(s.metrics.default_prob_annual_top, 0.002, max_relative = 1e-12);
        assert_relative_eq!(s.metrics.default_prob_annual, 0.002, max_relative = 1e-12);
    }

    #[test]
    fn relabelling_funds_leaves_market_indicators_unchanged() {
        let params = SimParams::default().with_scheme(crate::Scheme::Unregulated, 5.0);
        let mut sim = crate::Simulation::new(params.clone(), 9).unwrap();
        let reports: Vec<_> = (0..2000).map(|_| sim.step().unwrap()).collect();
        let a = run_metrics(&reports, &params).metrics;
        let permuted: Vec<_> = reports
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.funds.reverse();
                r
            })
            .collect();
        let mut rev = params.clone();
        rev.betas.reverse();
        let b = run_metrics(&permuted, &rev).metrics;
        assert_eq!(a.volatility_index, b.volatility_index);
        assert_relative_eq!(a.avg_volume, b.avg_volume, max_relative = 1e-12);
        assert_eq!(a.r_adj_annual_top, b.r_adj_annual_top);
    }

    #[test]
    fn bank_loss_accounting_closes() {
        let params = SimParams::default().with_scheme(crate::Scheme::Unregulated, 20.0);
        let mut sim = crate::Simulation::new(params.clone(), 21).unwrap();
        let reports: Vec<_> = (0..5000).map(|_| sim.step().unwrap()).collect();
        let s = run_metrics(&reports, &params);
        let total: f64 = reports.iter().map(|r| r.bank_loss_this_step).sum();
        assert_eq!(total, s.total_bank_loss);
        assert_relative_eq!(
            s.metrics.bank_losses_annual,
            total * 50.0 / 5000.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn all_cash_fund_without_flows_has_zero_return() {
        let w = FundWindow { start_wealth: 3e6, end_wealth: 3e6, steps: 400, ..Default::default() };
        assert_eq!(adjusted_return(&w), 0.0);
    }
}
