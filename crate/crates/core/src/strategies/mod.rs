//! Base bid strategies fitted on the training split.
//!
//! All three produce a scale `lambda_base` for linear bidding
//! `bid = floor(pctr * lambda)`:
//!
//! * `mcpc`: realized cost per click on the training log.
//! * `lin`: geometric grid around the `mcpc` scale, each candidate scored
//!   by a budget-capped replay of the training log.
//! * `lp`: greedy knapsack relaxation; the scale is set at the marginal
//!   cost-per-value ratio where the training budget runs out.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction::run_auction;
use crate::ctr::{mean_train_ctr, FMModel};
use crate::dataset::{BudgetFraction, CampaignDataset, ImpressionEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Mcpc,
    Lin,
    Lp,
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StrategyKind::Mcpc => "mcpc",
            StrategyKind::Lin => "lin",
            StrategyKind::Lp => "lp",
        })
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mcpc" => Ok(StrategyKind::Mcpc),
            "lin" => Ok(StrategyKind::Lin),
            "lp" => Ok(StrategyKind::Lp),
            other => Err(format!("unknown strategy `{other}` (expected mcpc, lin, or lp)")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("training log has no clicks")]
    NoClicks,
    #[error("training log has zero total cost")]
    ZeroTrainCost,
    #[error("every training event has price 0; no marginal ratio exists")]
    NoPricedEvents,
}

/// A training event reduced to what fitting needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredEvent {
    pub pctr: f64,
    pub market_price: u64,
    pub click: u8,
}

pub fn score_events(model: &FMModel, events: &[ImpressionEvent]) -> Vec<ScoredEvent> {
    events
        .iter()
        .map(|e| ScoredEvent { pctr: model.predict(e), market_price: e.market_price, click: e.click })
        .collect()
}

/// `floor(pctr * lambda)`, saturating at the integer range.
pub fn base_bid(pctr: f64, lambda: f64) -> u64 {
    (pctr * lambda).floor() as u64
}

/// One grid candidate from the `lin` search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    /// Reference bid at the mean training pCTR; the tiebreak quantity.
    pub b0: f64,
    pub clicks: u64,
    pub cost: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum FitMeta {
    Mcpc {
        train_cost: u64,
        train_clicks: u64,
    },
    Lin {
        theta0: f64,
        chosen: usize,
        grid: Vec<GridPoint>,
    },
    Lp {
        marginal_pctr: f64,
        marginal_price: u64,
        /// Items the greedy plan takes, including the marginal one.
        planned_items: usize,
        planned_cost: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyFit {
    pub kind: StrategyKind,
    pub lambda_base: f64,
    /// Budget fraction the fit was tuned for; `mcpc` ignores budgets.
    pub fraction: Option<BudgetFraction>,
    pub meta: FitMeta,
}

impl StrategyFit {
    pub fn bid(&self, pctr: f64) -> u64 {
        base_bid(pctr, self.lambda_base)
    }
}

/// Scale equal to the realized training cost per click.
pub fn fit_mcpc(train_cost: u64, train_clicks: u64) -> Result<StrategyFit, FitError> {
    if train_clicks == 0 {
        return Err(FitError::NoClicks);
    }
    if train_cost == 0 {
        return Err(FitError::ZeroTrainCost);
    }
    Ok(StrategyFit {
        kind: StrategyKind::Mcpc,
        lambda_base: train_cost as f64 / train_clicks as f64,
        fraction: None,
        meta: FitMeta::Mcpc { train_cost, train_clicks },
    })
}

/// 33 geometric candidates spanning `lambda_mcpc` times 1/16 through 16,
/// four points per octave.
pub fn lin_lambda_grid(lambda_mcpc: f64) -> Vec<f64> {
    (0..33)
        .map(|i| lambda_mcpc * f64::powf(2.0, (i as f64 - 16.0) / 4.0))
        .collect()
}

/// Clicks and cost from replaying the whole log against one budget pot.
fn replay_capped(scored: &[ScoredEvent], lambda: f64, budget: u64) -> (u64, u64) {
    let mut remaining = budget;
    let mut clicks = 0u64;
    let mut cost = 0u64;
    for s in scored {
        let ev = ImpressionEvent {
            campaign_id: String::new(),
            day_index: 0,
            hour: 0,
            market_price: s.market_price,
            click: s.click,
            features: Default::default(),
        };
        let out = run_auction(base_bid(s.pctr, lambda), &ev, remaining);
        remaining -= out.cost;
        cost += out.cost;
        clicks += out.click as u64;
    }
    (clicks, cost)
}

/// Grid search over [`lin_lambda_grid`], scored by capped replay of the
/// training log. Ties keep the smallest scale, hence the smallest `b0`.
pub fn fit_lin(
    scored: &[ScoredEvent],
    lambda_mcpc: f64,
    theta0: f64,
    budget: u64,
) -> Result<StrategyFit, FitError> {
    if scored.is_empty() {
        return Err(FitError::EmptyTrainingSet);
    }
    let grid: Vec<GridPoint> = lin_lambda_grid(lambda_mcpc)
        .into_iter()
        .map(|lambda| {
            let (clicks, cost) = replay_capped(scored, lambda, budget);
            GridPoint { lambda, b0: lambda * theta0, clicks, cost }
        })
        .collect();
    let mut chosen = 0usize;
    for (i, point) in grid.iter().enumerate() {
        if point.clicks > grid[chosen].clicks {
            chosen = i;
        }
    }
    Ok(StrategyFit {
        kind: StrategyKind::Lin,
        lambda_base: grid[chosen].lambda,
        fraction: None,
        meta: FitMeta::Lin { theta0, chosen, grid },
    })
}

/// Greedy knapsack relaxation. Events are taken in descending
/// value-per-cost order until the budget is spent; the scale is the
/// marginal event's price-to-pCTR ratio, nudged up one part in 1e9 so the
/// marginal event itself still clears after floor rounding.
pub fn fit_lp(scored: &[ScoredEvent], budget: u64) -> Result<StrategyFit, FitError> {
    if scored.is_empty() {
        return Err(FitError::EmptyTrainingSet);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    // Ascending price/pctr == descending pctr/price; free events sort first.
    // pctr is strictly positive, so the key is always finite.
    order.sort_by(|&a, &b| {
        let ka = scored[a].market_price as f64 / scored[a].pctr;
        let kb = scored[b].market_price as f64 / scored[b].pctr;
        ka.partial_cmp(&kb).expect("finite sort keys")
    });

    let mut cum: u128 = 0;
    let mut marginal: Option<usize> = None;
    let mut taken = 0usize;
    for &i in &order {
        cum += scored[i].market_price as u128;
        taken += 1;
        if cum >= budget as u128 {
            marginal = Some(i);
            break;
        }
    }
    // Budget covers everything: the worst-ratio priced event is marginal.
    let marginal = match marginal {
        Some(i) => i,
        None => {
            taken = order.len();
            *order
                .iter()
                .rev()
                .find(|&&i| scored[i].market_price > 0)
                .ok_or(FitError::NoPricedEvents)?
        }
    };
    let mut m = scored[marginal];
    if m.market_price == 0 {
        // Budget ran out inside the free prefix, which only happens when
        // budget is 0; fall back to the cheapest priced ratio if any.
        let priced = order
            .iter()
            .find(|&&i| scored[i].market_price > 0)
            .ok_or(FitError::NoPricedEvents)?;
        m = scored[*priced];
    }
    let lambda = m.market_price as f64 / m.pctr * (1.0 + 1e-9);
    Ok(StrategyFit {
        kind: StrategyKind::Lp,
        lambda_base: lambda,
        fraction: None,
        meta: FitMeta::Lp {
            marginal_pctr: m.pctr,
            marginal_price: m.market_price,
            planned_items: taken,
            planned_cost: cum.min(u64::MAX as u128) as u64,
        },
    })
}

/// Fits a strategy for one campaign and budget fraction. The training
/// budget pot is the fraction of the realized training spend.
pub fn fit_strategy(
    kind: StrategyKind,
    dataset: &CampaignDataset,
    model: &FMModel,
    fraction: BudgetFraction,
) -> Result<StrategyFit, FitError> {
    let mcpc = fit_mcpc(dataset.train_cost, dataset.train_clicks)?;
    let mut fit = match kind {
        StrategyKind::Mcpc => mcpc,
        StrategyKind::Lin => {
            let scored = score_events(model, &dataset.train);
            let theta0 = mean_train_ctr(model, &dataset.train)
                .map_err(|_| FitError::EmptyTrainingSet)?;
            let budget = fraction.apply(dataset.train_cost);
            fit_lin(&scored, mcpc.lambda_base, theta0, budget)?
        }
        StrategyKind::Lp => {
            let scored = score_events(model, &dataset.train);
            let budget = fraction.apply(dataset.train_cost);
            fit_lp(&scored, budget)?
        }
    };
    if kind != StrategyKind::Mcpc {
        fit.fraction = Some(fraction);
    }
    Ok(fit)
}
