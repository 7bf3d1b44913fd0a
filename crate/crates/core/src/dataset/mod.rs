//! Impression logs, campaign datasets, budget plans, and synthetic campaigns.
//!
//! All currency amounts are integer minor units. Budgets derived from
//! fractions round down, so a plan can never promise more than history spent.

mod schema;
mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use schema::{
    open_maybe_gzip, parse_log_file, parse_log_files, parse_log_line, rebase_day_indices,
    ColumnSchema, LineError, ParseMode, ParseStats, ROLE_CAMPAIGN, ROLE_CLICK, ROLE_HOUR,
    ROLE_PRICE, ROLE_TIMESTAMP,
};
pub use synth::{synth_events, synthesize_campaign, FieldSpec, SynthParams};

/// Categorical features in schema order; order is preserved so feature
/// encoding stays deterministic.
pub type FeatureMap = IndexMap<String, String>;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {kind}")]
    MalformedLine { line: usize, kind: LineError },
    #[error("log spans {have} distinct days, need at least {need}")]
    InsufficientDays { have: usize, need: usize },
    #[error("steps per day must divide 24, got {0}")]
    BadStepCount(usize),
    #[error("invalid schema: {0}")]
    BadSchema(String),
    #[error("invalid budget fraction: {0}")]
    BadFraction(String),
    #[error("invalid synth params: {0}")]
    BadSynthParams(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io { path: path.display().to_string(), source }
    }
}

/// One logged impression: what the exchange showed, what it cleared at, and
/// whether the user clicked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionEvent {
    pub campaign_id: String,
    /// 0-based, counted from the earliest day in the log.
    pub day_index: usize,
    /// 0..=23.
    pub hour: u8,
    /// Historical clearing price in minor currency units.
    pub market_price: u64,
    /// 0 or 1.
    pub click: u8,
    pub features: FeatureMap,
}

/// Writes events as canonical JSON lines.
pub fn write_events_jsonl(path: &Path, events: &[ImpressionEvent]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| DatasetError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for ev in events {
        serde_json::to_writer(&mut out, ev)?;
        out.write_all(b"\n").map_err(|e| DatasetError::io(path, e))?;
    }
    out.flush().map_err(|e| DatasetError::io(path, e))?;
    Ok(())
}

/// Reads events from canonical JSON lines; gzip input is detected by magic bytes.
pub fn read_events_jsonl(path: &Path) -> Result<Vec<ImpressionEvent>, DatasetError> {
    let reader = open_maybe_gzip(path)?;
    let mut events = Vec::new();
    for (no, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: ImpressionEvent = serde_json::from_str(&line).map_err(|e| DatasetError::MalformedLine {
            line: no + 1,
            kind: LineError::BadJson(e.to_string()),
        })?;
        events.push(ev);
    }
    Ok(events)
}

/// An exact rational in (0, 1], kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BudgetFraction {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

impl BudgetFraction {
    pub const HALF: BudgetFraction = BudgetFraction { num: 1, den: 2 };
    pub const EIGHTH: BudgetFraction = BudgetFraction { num: 1, den: 8 };
    pub const THIRTY_SECOND: BudgetFraction = BudgetFraction { num: 1, den: 32 };

    pub fn new(num: u64, den: u64) -> Result<Self, DatasetError> {
        if num == 0 || den == 0 || num > den {
            return Err(DatasetError::BadFraction(format!("{num}/{den} is not in (0, 1]")));
        }
        let g = gcd(num, den);
        Ok(BudgetFraction { num: num / g, den: den / g })
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    /// Scales an integer amount, rounding down. Exact integer arithmetic.
    pub fn apply(&self, amount: u64) -> u64 {
        ((amount as u128 * self.num as u128) / self.den as u128) as u64
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Filesystem-safe form, e.g. "1-8".
    pub fn file_tag(&self) -> String {
        format!("{}-{}", self.num, self.den)
    }
}

impl fmt::Display for BudgetFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for BudgetFraction {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DatasetError::BadFraction(s.to_string());
        match s.split_once('/') {
            Some((n, d)) => {
                let num = n.trim().parse().map_err(|_| bad())?;
                let den = d.trim().parse().map_err(|_| bad())?;
                BudgetFraction::new(num, den)
            }
            None => {
                let num = s.trim().parse().map_err(|_| bad())?;
                BudgetFraction::new(num, 1)
            }
        }
    }
}

impl Ord for BudgetFraction {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }
}

impl PartialOrd for BudgetFraction {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Serialize for BudgetFraction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BudgetFraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// One held-out day split into hourly decision steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayPartition {
    pub day_index: usize,
    /// `steps[t]` holds the events whose hour falls in step t; empty steps stay.
    pub steps: Vec<Vec<ImpressionEvent>>,
    /// Historical spend of the day (sum of market prices).
    pub cost: u64,
    pub clicks: u64,
}

impl DayPartition {
    pub fn impressions(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }
}

/// A campaign's training log plus its held-out test days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignDataset {
    pub campaign_id: String,
    pub steps_per_day: usize,
    pub train: Vec<ImpressionEvent>,
    pub test_days: Vec<DayPartition>,
    pub train_cost: u64,
    pub train_clicks: u64,
}

impl CampaignDataset {
    pub fn test_day_costs(&self) -> Vec<u64> {
        self.test_days.iter().map(|d| d.cost).collect()
    }

    pub fn total_test_cost(&self) -> u64 {
        self.test_days.iter().map(|d| d.cost).sum()
    }

    pub fn test_clicks(&self) -> u64 {
        self.test_days.iter().map(|d| d.clicks).sum()
    }

    pub fn test_impressions(&self) -> usize {
        self.test_days.iter().map(DayPartition::impressions).sum()
    }
}

/// Per-day budgets for one fraction of historical spend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub fraction: BudgetFraction,
    /// One budget per test day, same order as the dataset's test days.
    pub daily: Vec<u64>,
}

impl BudgetPlan {
    pub fn total(&self) -> u64 {
        self.daily.iter().sum()
    }
}

/// Budget per test day: the stated fraction of that day's historical cost,
/// rounded down.
pub fn plan_budget(dataset: &CampaignDataset, fraction: BudgetFraction) -> BudgetPlan {
    plan_budget_from_costs(&dataset.test_day_costs(), fraction)
}

pub fn plan_budget_from_costs(day_costs: &[u64], fraction: BudgetFraction) -> BudgetPlan {
    BudgetPlan { fraction, daily: day_costs.iter().map(|&c| fraction.apply(c)).collect() }
}

/// Splits a chronological log into train days and the last `test_day_count`
/// days, bucketing each test day into `steps_per_day` decision steps.
///
/// Step t collects the events with hour in `[t*24/T, (t+1)*24/T)`, so T must
/// divide 24. Events are ordered by (day, hour), ties keeping log order.
pub fn split_and_partition(
    mut events: Vec<ImpressionEvent>,
    test_day_count: usize,
    steps_per_day: usize,
) -> Result<CampaignDataset, DatasetError> {
    if steps_per_day == 0 || 24 % steps_per_day != 0 {
        return Err(DatasetError::BadStepCount(steps_per_day));
    }
    let days: BTreeSet<usize> = events.iter().map(|e| e.day_index).collect();
    let need = test_day_count.max(1) + 1;
    if days.len() < need || test_day_count == 0 {
        return Err(DatasetError::InsufficientDays { have: days.len(), need });
    }
    events.sort_by_key(|e| (e.day_index, e.hour));
    let test_days_set: BTreeSet<usize> = days.iter().rev().take(test_day_count).copied().collect();
    let cutoff = *test_days_set.iter().next().expect("nonempty");

    let campaign_id = events[0].campaign_id.clone();
    let hours_per_step = 24 / steps_per_day;
    let mut train = Vec::new();
    let mut test_days: Vec<DayPartition> = Vec::new();
    for ev in events {
        if ev.day_index < cutoff {
            train.push(ev);
            continue;
        }
        if test_days.last().map(|d| d.day_index) != Some(ev.day_index) {
            test_days.push(DayPartition {
                day_index: ev.day_index,
                steps: vec![Vec::new(); steps_per_day],
                cost: 0,
                clicks: 0,
            });
        }
        let day = test_days.last_mut().expect("just pushed");
        day.cost += ev.market_price;
        day.clicks += ev.click as u64;
        let step = ev.hour as usize / hours_per_step;
        day.steps[step].push(ev);
    }
    let train_cost = train.iter().map(|e| e.market_price).sum();
    let train_clicks = train.iter().map(|e| e.click as u64).sum();
    Ok(CampaignDataset { campaign_id, steps_per_day, train, test_days, train_cost, train_clicks })
}
