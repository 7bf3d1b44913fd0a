//! Run configuration: one JSON document describing the whole experiment
//! grid, validated with field paths before anything executes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::backend::HttpConfig;
use crate::agent::AgentConfig;
use crate::ctr::{TrainConfig, DEFAULT_HASH_BITS};
use crate::dataset::{BudgetFraction, SynthParams};
use crate::strategies::StrategyKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config at {path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse: {0}")]
    Json(#[from] serde_json::Error),
}

fn invalid(path: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { path: path.into(), msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated log; the seed defaults to a per-campaign derivation from
    /// the run seed.
    Synthetic {
        #[serde(default)]
        params: SynthParams,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// On-disk tab-separated logs, optionally gzipped.
    Log {
        paths: Vec<PathBuf>,
        #[serde(default)]
        schema: Option<PathBuf>,
        #[serde(default)]
        skip_malformed: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSpec {
    pub id: String,
    pub source: DataSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BidderMode {
    Baseline,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum BackendSpec {
    StubZero,
    StubPacing,
    Http(HttpConfig),
}

impl BackendSpec {
    pub fn tag(&self) -> String {
        match self {
            BackendSpec::StubZero => "stub-zero".into(),
            BackendSpec::StubPacing => "stub-pacing".into(),
            BackendSpec::Http(cfg) => format!("http:{}", cfg.model),
        }
    }
}

fn default_backend() -> BackendSpec {
    BackendSpec::StubZero
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BidderSpec {
    pub strategy: StrategyKind,
    pub mode: BidderMode,
    /// Only consulted in agent mode.
    #[serde(default = "default_backend")]
    pub backend: BackendSpec,
}

impl BidderSpec {
    pub fn label(&self) -> String {
        match self.mode {
            BidderMode::Baseline => self.strategy.to_string(),
            BidderMode::Agent => format!("{}+agent({})", self.strategy, self.backend.tag()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub hash_bits: u32,
    pub fm: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { hash_bits: DEFAULT_HASH_BITS, fm: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub pipeline: AgentConfig,
    /// Overrides the built-in prompt templates when set.
    pub template_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps_per_day: usize,
    pub test_day_count: usize,
    pub fractions: Vec<BudgetFraction>,
    pub campaigns: Vec<CampaignSpec>,
    pub bidders: Vec<BidderSpec>,
    pub train: TrainSection,
    pub agent: AgentSection,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            steps_per_day: 24,
            test_day_count: 3,
            fractions: vec![
                BudgetFraction::HALF,
                BudgetFraction::EIGHTH,
                BudgetFraction::THIRTY_SECOND,
            ],
            campaigns: Vec::new(),
            bidders: Vec::new(),
            train: TrainSection::default(),
            agent: AgentSection::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

fn fnv1a(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

fn id_is_filename_safe(id: &str) -> bool {
    !id.is_empty()
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// A self-contained synthetic demo grid used when no config is given.
    pub fn demo() -> Self {
        RunConfig {
            campaigns: vec![CampaignSpec {
                id: "demo".into(),
                source: DataSource::Synthetic { params: SynthParams::default(), seed: None },
            }],
            bidders: vec![
                BidderSpec {
                    strategy: StrategyKind::Mcpc,
                    mode: BidderMode::Baseline,
                    backend: default_backend(),
                },
                BidderSpec {
                    strategy: StrategyKind::Lin,
                    mode: BidderMode::Baseline,
                    backend: default_backend(),
                },
                BidderSpec {
                    strategy: StrategyKind::Lp,
                    mode: BidderMode::Baseline,
                    backend: default_backend(),
                },
                BidderSpec {
                    strategy: StrategyKind::Lp,
                    mode: BidderMode::Agent,
                    backend: BackendSpec::StubPacing,
                },
            ],
            ..RunConfig::default()
        }
    }

    /// Fills derived values: synthetic seeds, campaign ids, and the day
    /// geometry pushed down into synthetic params.
    pub fn resolve(&mut self) {
        let run_seed = self.seed;
        let (steps, test_days) = (self.steps_per_day, self.test_day_count);
        for spec in &mut self.campaigns {
            if let DataSource::Synthetic { params, seed } = &mut spec.source {
                if seed.is_none() {
                    *seed = Some(run_seed ^ fnv1a(&spec.id));
                }
                params.campaign_id = spec.id.clone();
                params.steps_per_day = steps;
                params.test_day_count = test_days;
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.steps_per_day == 0 || 24 % self.steps_per_day != 0 {
            return Err(invalid(
                "steps_per_day",
                format!("{} does not divide 24 hours into equal steps", self.steps_per_day),
            ));
        }
        if self.test_day_count == 0 {
            return Err(invalid("test_day_count", "must be at least 1"));
        }
        if self.fractions.is_empty() {
            return Err(invalid("fractions", "at least one budget fraction required"));
        }
        for (i, f) in self.fractions.iter().enumerate() {
            if self.fractions[..i].contains(f) {
                return Err(invalid(format!("fractions[{i}]"), format!("duplicate fraction {f}")));
            }
        }
        if self.campaigns.is_empty() {
            return Err(invalid("campaigns", "at least one campaign required"));
        }
        for (i, c) in self.campaigns.iter().enumerate() {
            if !id_is_filename_safe(&c.id) {
                return Err(invalid(
                    format!("campaigns[{i}].id"),
                    "ids must be non-empty and use only letters, digits, '-', '_'",
                ));
            }
            if self.campaigns[..i].iter().any(|other| other.id == c.id) {
                return Err(invalid(format!("campaigns[{i}].id"), format!("duplicate id {}", c.id)));
            }
            match &c.source {
                DataSource::Synthetic { params, .. } => {
                    params.validate().map_err(|e| {
                        invalid(format!("campaigns[{i}].source.params"), e.to_string())
                    })?;
                    if params.days <= self.test_day_count {
                        return Err(invalid(
                            format!("campaigns[{i}].source.params.days"),
                            format!(
                                "{} days leaves no training data before {} test days",
                                params.days, self.test_day_count
                            ),
                        ));
                    }
                }
                DataSource::Log { paths, .. } => {
                    if paths.is_empty() {
                        return Err(invalid(
                            format!("campaigns[{i}].source.paths"),
                            "at least one log path required",
                        ));
                    }
                }
            }
        }
        if self.bidders.is_empty() {
            return Err(invalid("bidders", "at least one bidder required"));
        }
        for (i, b) in self.bidders.iter().enumerate() {
            if self.bidders[..i].iter().any(|other| other.label() == b.label()) {
                return Err(invalid(
                    format!("bidders[{i}]"),
                    format!("duplicate bidder {}", b.label()),
                ));
            }
        }
        if !(1..=30).contains(&self.train.hash_bits) {
            return Err(invalid("train.hash_bits", "must be in 1..=30"));
        }
        self.train.fm.validate().map_err(|e| invalid("train.fm", e.to_string()))?;
        if !self.agent.pipeline.temperature.is_finite() || self.agent.pipeline.temperature < 0.0 {
            return Err(invalid("agent.pipeline.temperature", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Narrows the grid from the command line; `None` means no restriction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridFilter {
    pub campaign: Option<String>,
    pub fraction: Option<BudgetFraction>,
    pub bidder: Option<BidderFilter>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BidderFilter {
    /// Baseline cells for one strategy.
    Strategy(StrategyKind),
    /// Every agent-mode cell.
    Agent,
}

impl std::str::FromStr for BidderFilter {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "agent" {
            Ok(BidderFilter::Agent)
        } else {
            s.parse::<StrategyKind>().map(BidderFilter::Strategy)
        }
    }
}

impl GridFilter {
    pub fn admits_campaign(&self, id: &str) -> bool {
        self.campaign.as_deref().is_none_or(|c| c == id)
    }

    pub fn admits_fraction(&self, f: BudgetFraction) -> bool {
        self.fraction.is_none_or(|want| want == f)
    }

    pub fn admits_bidder(&self, spec: &BidderSpec) -> bool {
        match self.bidder {
            None => true,
            Some(BidderFilter::Agent) => spec.mode == BidderMode::Agent,
            Some(BidderFilter::Strategy(kind)) => {
                spec.mode == BidderMode::Baseline && spec.strategy == kind
            }
        }
    }
}
