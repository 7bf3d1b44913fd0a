//! Grid execution: campaigns x fractions x bidders. Each cell replays its
//! test days in isolation and writes its own directory; cell failures are
//! recorded, not propagated, so one bad cell never sinks the run.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::backend::{BackendError, HttpBackend, LlmBackend, StubBackend};
use crate::agent::templates::{TemplateError, TemplateSet};
use crate::agent::{AgentBidder, TranscriptEvent};
use crate::auction::{run_day, Bidder, DayReport, FixedLambdaBidder, RunDayError, StepReport};
use crate::ctr::{load_model, save_model, train, CtrError, FMModel, FeatureIndexer};
use crate::dataset::{
    parse_log_files, plan_budget, split_and_partition, synthesize_campaign, BudgetFraction,
    CampaignDataset, ColumnSchema, DatasetError, ParseMode,
};
use crate::memory::MemoryError;
use crate::strategies::{fit_strategy, FitError, StrategyKind};

use super::config::{
    BackendSpec, BidderMode, BidderSpec, CampaignSpec, ConfigError, DataSource, GridFilter,
    RunConfig,
};
use super::reports;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("campaign {id}: {source}")]
    Dataset {
        id: String,
        #[source]
        source: DatasetError,
    },
    #[error("campaign {id}: no events carry this campaign id")]
    NoCampaignEvents { id: String },
    #[error("campaign {id} model: {source}")]
    Ctr {
        id: String,
        #[source]
        source: CtrError,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("strategy fit: {0}")]
    Fit(#[from] FitError),
    #[error(transparent)]
    Replay(#[from] RunDayError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: Box<csv::Error>,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no run result at {0}; run the grid first")]
    MissingRunResult(PathBuf),
    #[error("the grid filter matched no cells")]
    EmptyGrid,
}

fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path, source: csv::Error) -> HarnessError {
    HarnessError::Csv { path: path.to_path_buf(), source: Box::new(source) }
}

/// Dataset plus trained model for one campaign, shared by all its cells.
pub struct PreparedCampaign {
    pub id: String,
    pub dataset: CampaignDataset,
    pub model: FMModel,
    pub final_log_loss: f64,
    /// True when the model came from an existing artifact instead of training.
    pub model_reused: bool,
}

pub fn load_campaign_dataset(
    cfg: &RunConfig,
    spec: &CampaignSpec,
) -> Result<CampaignDataset, HarnessError> {
    let wrap = |source| HarnessError::Dataset { id: spec.id.clone(), source };
    match &spec.source {
        DataSource::Synthetic { params, seed } => {
            synthesize_campaign(seed.unwrap_or(cfg.seed), params).map_err(wrap)
        }
        DataSource::Log { paths, schema, skip_malformed } => {
            let schema = match schema {
                Some(path) => ColumnSchema::from_json_file(path).map_err(wrap)?,
                None => ColumnSchema::default_ipinyou(),
            };
            let mode =
                if *skip_malformed { ParseMode::SkipMalformed } else { ParseMode::Strict };
            let (mut events, _stats) =
                parse_log_files(paths, &schema, &spec.id, mode).map_err(wrap)?;
            // Logs may mix advertisers; keep only this campaign's rows.
            events.retain(|e| e.campaign_id == spec.id);
            if events.is_empty() {
                return Err(HarnessError::NoCampaignEvents { id: spec.id.clone() });
            }
            split_and_partition(events, cfg.test_day_count, cfg.steps_per_day).map_err(wrap)
        }
    }
}

pub fn model_path(cfg: &RunConfig, campaign_id: &str) -> PathBuf {
    cfg.out_dir.join(format!("model_{campaign_id}.json"))
}

/// Loads the campaign and either reuses a saved model artifact or trains
/// and saves a fresh one.
pub fn prepare_campaign(
    cfg: &RunConfig,
    spec: &CampaignSpec,
) -> Result<PreparedCampaign, HarnessError> {
    let dataset = load_campaign_dataset(cfg, spec)?;
    let path = model_path(cfg, &spec.id);
    let wrap = |source| HarnessError::Ctr { id: spec.id.clone(), source };
    let (model, final_log_loss, model_reused) = if path.is_file() {
        let (model, _train_config, loss) = load_model(&path).map_err(wrap)?;
        (model, loss, true)
    } else {
        let indexer = FeatureIndexer::new(cfg.train.hash_bits).map_err(wrap)?;
        let trained = train(&dataset.train, indexer, &cfg.train.fm).map_err(wrap)?;
        save_model(&path, &trained, &cfg.train.fm).map_err(wrap)?;
        (trained.model, trained.final_log_loss, false)
    };
    Ok(PreparedCampaign { id: spec.id.clone(), dataset, model, final_log_loss, model_reused })
}

pub fn build_backend(spec: &BackendSpec) -> Result<Box<dyn LlmBackend + Send>, BackendError> {
    Ok(match spec {
        BackendSpec::StubZero => Box::new(StubBackend::zero()),
        BackendSpec::StubPacing => Box::new(StubBackend::pacing()),
        BackendSpec::Http(cfg) => Box::new(HttpBackend::new(cfg.clone())?),
    })
}

/// One row of a cell's `steps.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub day: usize,
    pub step: usize,
    /// Impressions replayed in the step.
    pub d_t: usize,
    pub wins: u64,
    pub cost: u64,
    pub clicks: u64,
    pub lambda_t: f64,
    pub adjustment: f64,
    pub remaining_budget: u64,
    pub cpc: Option<f64>,
}

impl StepRow {
    fn from_report(r: &StepReport) -> Self {
        StepRow {
            day: r.day_index,
            step: r.step_index,
            d_t: r.impressions,
            wins: r.wins,
            cost: r.cost,
            clicks: r.clicks,
            lambda_t: r.lambda,
            adjustment: r.adjustment,
            remaining_budget: r.remaining_after,
            cpc: r.cpc_after,
        }
    }
}

pub fn write_steps_csv(path: &Path, rows: &[StepRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn read_steps_csv(path: &Path) -> Result<Vec<StepRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().collect::<Result<Vec<StepRow>, _>>().map_err(|e| csv_err(path, e))
}

/// Aggregates of one finished cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub lambda_base: f64,
    pub budget_total: u64,
    pub impressions: usize,
    /// Auctions entered; the replay bids on every impression.
    pub bids: u64,
    pub wins: u64,
    pub cost: u64,
    pub clicks: u64,
    pub win_rate: f64,
    pub cpc: Option<f64>,
    pub day_clicks: Vec<u64>,
    /// Steps where the action stage fell back to a zero adjustment.
    pub fallback_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub campaign: String,
    pub bidder: String,
    pub strategy: StrategyKind,
    pub mode: BidderMode,
    pub fraction: BudgetFraction,
    /// Cell directory, relative to the run root.
    pub dir: String,
    /// Per-step CSV, relative to the run root.
    pub steps_csv: String,
    /// Call transcript, relative to the run root; agent cells only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub transcript: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stats: Option<CellStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl CellResult {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn steps_csv_path(&self, out_dir: &Path) -> PathBuf {
        out_dir.join(&self.steps_csv)
    }

    pub fn clicks(&self) -> Option<u64> {
        self.stats.as_ref().map(|s| s.clicks)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub cells: Vec<CellResult>,
}

pub const RUN_RESULT_FILE: &str = "run_result.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

impl RunResult {
    pub fn failed(&self) -> Vec<&CellResult> {
        self.cells.iter().filter(|c| !c.ok()).collect()
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), HarnessError> {
        let path = out_dir.join(RUN_RESULT_FILE);
        write_json_pretty(&path, self)
    }

    pub fn load(out_dir: &Path) -> Result<Self, HarnessError> {
        let path = out_dir.join(RUN_RESULT_FILE);
        if !path.is_file() {
            return Err(HarnessError::MissingRunResult(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n").map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Directory-safe form of a bidder label.
fn sanitize_label(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    for c in label.chars() {
        if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
            out.push(c);
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

/// Assigns each bidder a unique directory name in config order.
fn bidder_dirs(bidders: &[BidderSpec]) -> Vec<String> {
    let mut taken: Vec<String> = Vec::new();
    for spec in bidders {
        let base = sanitize_label(&spec.label());
        let mut name = base.clone();
        let mut n = 2;
        while taken.contains(&name) {
            name = format!("{base}-{n}");
            n += 1;
        }
        taken.push(name);
    }
    taken
}

fn run_cell(
    cfg: &RunConfig,
    prep: &PreparedCampaign,
    fraction: BudgetFraction,
    spec: &BidderSpec,
    templates: &TemplateSet,
    dir_rel: &str,
) -> Result<CellStats, HarnessError> {
    let dir = cfg.out_dir.join(dir_rel);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

    let fit = fit_strategy(spec.strategy, &prep.dataset, &prep.model, fraction)?;
    write_json_pretty(&dir.join("fit.json"), &fit)?;
    let plan = plan_budget(&prep.dataset, fraction);

    let replay = |bidder: &mut dyn Bidder| -> Result<Vec<DayReport>, HarnessError> {
        prep.dataset
            .test_days
            .iter()
            .zip(&plan.daily)
            .map(|(day, &budget)| {
                run_day(day, &prep.model, fit.lambda_base, budget, bidder).map_err(Into::into)
            })
            .collect()
    };

    let mut fallback_steps = 0usize;
    let days = match spec.mode {
        BidderMode::Baseline => {
            let mut bidder = FixedLambdaBidder::new(fit.lambda_base);
            replay(&mut bidder)?
        }
        BidderMode::Agent => {
            let backend = build_backend(&spec.backend)?;
            let mut bidder =
                AgentBidder::new(spec.label(), backend, templates.clone(), cfg.agent.pipeline);
            let days = replay(&mut bidder)?;
            let transcript = bidder.take_transcript();
            fallback_steps = transcript
                .iter()
                .filter(|ev| matches!(ev, TranscriptEvent::Step(s) if s.fallback))
                .count();
            let tx_path = dir.join("transcript.jsonl");
            let mut out = BufWriter::new(File::create(&tx_path).map_err(|e| io_err(&tx_path, e))?);
            for event in &transcript {
                serde_json::to_writer(&mut out, event)?;
                out.write_all(b"\n").map_err(|e| io_err(&tx_path, e))?;
            }
            out.flush().map_err(|e| io_err(&tx_path, e))?;
            bidder.memory().save_dir(&dir)?;
            days
        }
    };

    let rows: Vec<StepRow> =
        days.iter().flat_map(|d| d.steps.iter().map(StepRow::from_report)).collect();
    write_steps_csv(&dir.join("steps.csv"), &rows)?;

    let impressions: usize = days.iter().map(|d| d.impressions).sum();
    let wins: u64 = days.iter().map(|d| d.wins).sum();
    let cost: u64 = days.iter().map(|d| d.cost).sum();
    let clicks: u64 = days.iter().map(|d| d.clicks).sum();
    debug_assert_eq!(clicks, rows.iter().map(|r| r.clicks).sum::<u64>());
    debug_assert_eq!(cost, rows.iter().map(|r| r.cost).sum::<u64>());
    debug_assert_eq!(wins, rows.iter().map(|r| r.wins).sum::<u64>());
    Ok(CellStats {
        lambda_base: fit.lambda_base,
        budget_total: plan.total(),
        impressions,
        bids: impressions as u64,
        wins,
        cost,
        clicks,
        win_rate: if impressions > 0 { wins as f64 / impressions as f64 } else { 0.0 },
        cpc: (clicks > 0).then(|| cost as f64 / clicks as f64),
        day_clicks: days.iter().map(|d| d.clicks).collect(),
        fallback_steps,
    })
}

/// Runs every cell the filter admits and writes all run artifacts under
/// `cfg.out_dir`. Cell order, and therefore every output file, is
/// deterministic for a given config.
pub fn run_grid(cfg: &RunConfig, filter: &GridFilter) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    write_json_pretty(&cfg.out_dir.join(RESOLVED_CONFIG_FILE), cfg)?;

    let templates = match &cfg.agent.template_dir {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::default(),
    };

    let prepared: Vec<(&CampaignSpec, Result<PreparedCampaign, String>)> = cfg
        .campaigns
        .iter()
        .filter(|c| filter.admits_campaign(&c.id))
        .map(|c| (c, prepare_campaign(cfg, c).map_err(|e| e.to_string())))
        .collect();

    let dirs = bidder_dirs(&cfg.bidders);
    let mut plans = Vec::new();
    for (spec, prep) in &prepared {
        for &fraction in &cfg.fractions {
            if !filter.admits_fraction(fraction) {
                continue;
            }
            for (bidder, dir_name) in cfg.bidders.iter().zip(&dirs) {
                if filter.admits_bidder(bidder) {
                    plans.push((*spec, prep, fraction, bidder, dir_name));
                }
            }
        }
    }
    if plans.is_empty() {
        return Err(HarnessError::EmptyGrid);
    }

    let cells: Vec<CellResult> = plans
        .par_iter()
        .map(|(spec, prep, fraction, bidder, dir_name)| {
            let dir_rel = format!("{}/{}/{}", spec.id, fraction.file_tag(), dir_name);
            let mut cell = CellResult {
                campaign: spec.id.clone(),
                bidder: bidder.label(),
                strategy: bidder.strategy,
                mode: bidder.mode,
                fraction: *fraction,
                steps_csv: format!("{dir_rel}/steps.csv"),
                transcript: (bidder.mode == BidderMode::Agent)
                    .then(|| format!("{dir_rel}/transcript.jsonl")),
                dir: dir_rel.clone(),
                stats: None,
                error: None,
            };
            match prep {
                Err(e) => cell.error = Some(e.clone()),
                Ok(prep) => {
                    match run_cell(cfg, prep, *fraction, bidder, &templates, &dir_rel) {
                        Ok(stats) => cell.stats = Some(stats),
                        Err(e) => cell.error = Some(e.to_string()),
                    }
                }
            }
            cell
        })
        .collect();

    let result = RunResult { cells };
    reports::write_run_reports(cfg, &result)?;
    result.save(&cfg.out_dir)?;
    Ok(result)
}
