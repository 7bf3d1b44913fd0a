//! Experiment harness: a single JSON config describes a grid of campaigns,
//! budget fractions, and bidders; the runner replays every cell and writes
//! reproducible CSV/JSONL artifacts under one output directory.

pub mod config;
pub mod reports;
pub mod runner;

pub use config::{
    BackendSpec, BidderFilter, BidderMode, BidderSpec, CampaignSpec, ConfigError, DataSource,
    GridFilter, RunConfig,
};
pub use reports::{format_percent, percent_improvement};
pub use runner::{
    build_backend, load_campaign_dataset, model_path, prepare_campaign, read_steps_csv, run_grid,
    CellResult, CellStats, HarnessError, PreparedCampaign, RunResult, StepRow,
    RESOLVED_CONFIG_FILE, RUN_RESULT_FILE,
};
