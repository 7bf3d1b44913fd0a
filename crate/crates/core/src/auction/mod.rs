//! Second-price auction replay over logged impressions.
//!
//! A replayed bid wins when it meets the logged clearing price; the winner
//! pays that price, never more than the submitted bid or the remaining
//! budget, so a day can never overspend its allocation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctr::FMModel;
use crate::dataset::{DayPartition, ImpressionEvent};

/// Result of replaying one impression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuctionOutcome {
    pub won: bool,
    /// Amount paid: the logged market price on a win, 0 otherwise.
    pub cost: u64,
    /// The event's click label, credited only on a win.
    pub click: u8,
    /// The submitted bid before budget capping.
    pub bid: u64,
}

/// Replays one second-price auction. The effective bid is capped at the
/// remaining budget; a capped bid equal to the market price still wins.
pub fn run_auction(bid: u64, event: &ImpressionEvent, remaining_budget: u64) -> AuctionOutcome {
    let effective = bid.min(remaining_budget);
    let won = effective >= event.market_price;
    AuctionOutcome {
        won,
        cost: if won { event.market_price } else { 0 },
        click: if won { event.click } else { 0 },
        bid,
    }
}

/// What a bidder is allowed to see about the current day so far.
///
/// Counters cover every auction seen this day; derived rates are exposed
/// through methods and the serializable [`EnvStatus`] snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub day_index: usize,
    /// Step about to run (0-based), maintained by [`run_day`].
    pub step_index: usize,
    pub steps_per_day: usize,
    pub total_budget: u64,
    pub remaining_budget: u64,
    pub bids_made: u64,
    pub wins: u64,
    pub total_cost: u64,
    pub clicks: u64,
    pub lambda_base: f64,
    pub last_adjustment: Option<f64>,
    market_price_sum: u64,
}

impl EnvState {
    pub fn new(day_index: usize, steps_per_day: usize, budget: u64, lambda_base: f64) -> Self {
        EnvState {
            day_index,
            step_index: 0,
            steps_per_day,
            total_budget: budget,
            remaining_budget: budget,
            bids_made: 0,
            wins: 0,
            total_cost: 0,
            clicks: 0,
            lambda_base,
            last_adjustment: None,
            market_price_sum: 0,
        }
    }

    pub fn win_rate(&self) -> f64 {
        if self.bids_made == 0 {
            0.0
        } else {
            self.wins as f64 / self.bids_made as f64
        }
    }

    /// Mean clearing price over every auction seen today, won or lost.
    pub fn avg_market_price_seen(&self) -> Option<f64> {
        (self.bids_made > 0).then(|| self.market_price_sum as f64 / self.bids_made as f64)
    }

    /// Cost per thousand wins.
    pub fn cpm(&self) -> Option<f64> {
        (self.wins > 0).then(|| self.total_cost as f64 / self.wins as f64 * 1000.0)
    }

    pub fn cpc(&self) -> Option<f64> {
        (self.clicks > 0).then(|| self.total_cost as f64 / self.clicks as f64)
    }

    pub fn status(&self) -> EnvStatus {
        EnvStatus {
            day_index: self.day_index,
            step_index: self.step_index,
            steps_per_day: self.steps_per_day,
            total_budget: self.total_budget,
            remaining_budget: self.remaining_budget,
            total_cost: self.total_cost,
            bids_made: self.bids_made,
            wins: self.wins,
            win_rate: self.win_rate(),
            clicks: self.clicks,
            avg_market_price_seen: self.avg_market_price_seen(),
            cpm: self.cpm(),
            cpc: self.cpc(),
            lambda_base: self.lambda_base,
            last_adjustment: self.last_adjustment,
        }
    }
}

/// Serializable snapshot of [`EnvState`], rendered into prompts and stored
/// in environment memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvStatus {
    pub day_index: usize,
    pub step_index: usize,
    pub steps_per_day: usize,
    pub total_budget: u64,
    pub remaining_budget: u64,
    pub total_cost: u64,
    pub bids_made: u64,
    pub wins: u64,
    pub win_rate: f64,
    pub clicks: u64,
    pub avg_market_price_seen: Option<f64>,
    pub cpm: Option<f64>,
    pub cpc: Option<f64>,
    pub lambda_base: f64,
    pub last_adjustment: Option<f64>,
}

/// Per-step context handed to a bidder: value estimates for the step's
/// impressions, never their labels or prices.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub day_index: usize,
    pub step_index: usize,
    pub steps_per_day: usize,
    pub pctrs: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BidderDecision {
    /// Bid scale for the step; bids are `floor(pctr * lambda)`.
    pub lambda: f64,
    /// Relative adjustment against the base scale; 0 for fixed bidders.
    pub adjustment: f64,
}

#[derive(Debug, Error)]
pub enum BidderError {
    #[error("backend: {0}")]
    Backend(String),
    #[error("template: {0}")]
    Template(String),
    #[error("{0}")]
    Other(String),
}

/// A per-step bidding policy. `decide` sees the day state and the step's
/// value estimates; hooks observe outcomes but cannot rewrite them.
pub trait Bidder {
    fn name(&self) -> String;

    fn decide(&mut self, state: &EnvState, ctx: &StepContext<'_>)
        -> Result<BidderDecision, BidderError>;

    /// Called after each step with the realized outcome.
    fn observe_step(&mut self, _report: &StepReport, _state: &EnvState) -> Result<(), BidderError> {
        Ok(())
    }

    /// Called once after the day's last step.
    fn end_day(&mut self, _state: &EnvState) -> Result<(), BidderError> {
        Ok(())
    }
}

/// Bids `floor(pctr * lambda)` with a constant scale.
#[derive(Debug, Clone)]
pub struct FixedLambdaBidder {
    pub lambda: f64,
}

impl FixedLambdaBidder {
    pub fn new(lambda: f64) -> Self {
        FixedLambdaBidder { lambda }
    }
}

impl Bidder for FixedLambdaBidder {
    fn name(&self) -> String {
        "fixed".to_string()
    }

    fn decide(
        &mut self,
        _state: &EnvState,
        _ctx: &StepContext<'_>,
    ) -> Result<BidderDecision, BidderError> {
        Ok(BidderDecision { lambda: self.lambda, adjustment: 0.0 })
    }
}

/// One decision step's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub day_index: usize,
    pub step_index: usize,
    /// d_t: impressions replayed in this step.
    pub impressions: usize,
    pub wins: u64,
    pub cost: u64,
    pub clicks: u64,
    pub mean_bid: Option<f64>,
    pub mean_market_price: Option<f64>,
    pub lambda: f64,
    pub adjustment: f64,
    /// Budget left after the step.
    pub remaining_after: u64,
    /// Cumulative day CPC after the step.
    pub cpc_after: Option<f64>,
}

/// Replays one step's impressions sequentially under the remaining budget.
/// `pctrs` must align with `events`.
pub fn run_step(
    events: &[ImpressionEvent],
    pctrs: &[f64],
    decision: &BidderDecision,
    state: &mut EnvState,
) -> StepReport {
    assert_eq!(events.len(), pctrs.len(), "pctrs must align with events");
    assert!(decision.lambda > 0.0, "lambda must be positive");
    let mut wins = 0u64;
    let mut cost = 0u64;
    let mut clicks = 0u64;
    let mut bid_sum = 0u128;
    let mut price_sum = 0u128;
    for (ev, &p) in events.iter().zip(pctrs) {
        let bid = (p * decision.lambda).floor() as u64;
        let out = run_auction(bid, ev, state.remaining_budget);
        debug_assert!(out.cost <= state.remaining_budget);
        state.remaining_budget -= out.cost;
        state.total_cost += out.cost;
        state.bids_made += 1;
        state.market_price_sum += ev.market_price;
        if out.won {
            wins += 1;
            cost += out.cost;
            clicks += out.click as u64;
        }
        bid_sum += bid as u128;
        price_sum += ev.market_price as u128;
    }
    state.wins += wins;
    state.clicks += clicks;
    state.last_adjustment = Some(decision.adjustment);
    let n = events.len();
    StepReport {
        day_index: state.day_index,
        step_index: state.step_index,
        impressions: n,
        wins,
        cost,
        clicks,
        mean_bid: (n > 0).then(|| bid_sum as f64 / n as f64),
        mean_market_price: (n > 0).then(|| price_sum as f64 / n as f64),
        lambda: decision.lambda,
        adjustment: decision.adjustment,
        remaining_after: state.remaining_budget,
        cpc_after: state.cpc(),
    }
}

/// One test day under one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayReport {
    pub day_index: usize,
    pub budget: u64,
    pub steps: Vec<StepReport>,
    pub impressions: usize,
    pub wins: u64,
    pub cost: u64,
    pub clicks: u64,
    pub remaining_budget: u64,
}

#[derive(Debug, Error)]
#[error("day {day} step {step}: {source}")]
pub struct RunDayError {
    pub day: usize,
    pub step: usize,
    #[source]
    pub source: BidderError,
}

/// Replays one day step by step. The budget persists across steps and is
/// never exceeded; every step produces a decision, including empty ones.
pub fn run_day(
    day: &DayPartition,
    model: &FMModel,
    lambda_base: f64,
    budget: u64,
    bidder: &mut dyn Bidder,
) -> Result<DayReport, RunDayError> {
    let mut state = EnvState::new(day.day_index, day.steps.len(), budget, lambda_base);
    let mut reports = Vec::with_capacity(day.steps.len());
    for (t, step_events) in day.steps.iter().enumerate() {
        state.step_index = t;
        let pctrs: Vec<f64> = step_events.iter().map(|e| model.predict(e)).collect();
        let ctx = StepContext {
            day_index: day.day_index,
            step_index: t,
            steps_per_day: day.steps.len(),
            pctrs: &pctrs,
        };
        let err = |source| RunDayError { day: day.day_index, step: t, source };
        let decision = bidder.decide(&state, &ctx).map_err(err)?;
        if !(decision.lambda > 0.0 && decision.lambda.is_finite()) {
            return Err(err(BidderError::Other(format!(
                "non-positive lambda {}",
                decision.lambda
            ))));
        }
        let report = run_step(step_events, &pctrs, &decision, &mut state);
        bidder.observe_step(&report, &state).map_err(err)?;
        reports.push(report);
    }
    bidder
        .end_day(&state)
        .map_err(|source| RunDayError { day: day.day_index, step: day.steps.len(), source })?;
    Ok(DayReport {
        day_index: day.day_index,
        budget,
        impressions: reports.iter().map(|r| r.impressions).sum(),
        wins: reports.iter().map(|r| r.wins).sum(),
        cost: reports.iter().map(|r| r.cost).sum(),
        clicks: reports.iter().map(|r| r.clicks).sum(),
        remaining_budget: state.remaining_budget,
        steps: reports,
    })
}
