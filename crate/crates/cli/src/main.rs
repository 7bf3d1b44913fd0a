//! `rtb`: replay second-price ad auctions under daily budgets with expert
//! and LLM-driven bidders.
//!
//! Exit codes: 0 on success, 1 when any cell or campaign failed, 2 for
//! configuration or usage problems.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rtb_core::ctr::{save_model, train, FeatureIndexer};
use rtb_core::dataset::write_events_jsonl;
use rtb_core::harness::reports::{
    present_fractions, write_compare_csv, write_curves_csv, write_report_csv,
};
use rtb_core::harness::{
    load_campaign_dataset, model_path, prepare_campaign, run_grid, BackendSpec, BidderMode,
    CampaignSpec, GridFilter, HarnessError, RunConfig, RunResult, RESOLVED_CONFIG_FILE,
};
use rtb_core::strategies::{fit_strategy, StrategyKind};

#[derive(Parser)]
#[command(
    name = "rtb",
    version,
    about = "Budget-capped second-price auction replay with expert and agent bidders"
)]
struct Cli {
    /// JSON run config; omit it to use a built-in synthetic demo grid.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Restrict the grid to one campaign id.
    #[arg(long, global = true, value_name = "ID")]
    campaign: Option<String>,

    /// Restrict the grid to one budget fraction, e.g. 1/8.
    #[arg(long, global = true, value_name = "F")]
    fraction: Option<String>,

    /// Restrict the grid to one bidder: mcpc, lin, lp, or agent.
    #[arg(long, global = true, value_name = "NAME")]
    bidder: Option<String>,

    /// Replace the backend of every agent bidder.
    #[arg(long, global = true, value_enum, value_name = "KIND")]
    backend: Option<BackendArg>,

    /// Override the run seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    StubZero,
    StubPacing,
    Http,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize each campaign's events to JSONL and print a summary.
    PrepareData,
    /// Train the click models from scratch and save their artifacts.
    TrainCtr,
    /// Fit the bidding strategies and print their base scales.
    FitStrategy,
    /// Run the whole grid and write every artifact.
    Run,
    /// Rebuild report.csv and compare.csv from a finished run.
    Report,
    /// Rebuild the per-step budget and CPC curve files from a finished run.
    Curves,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::EmptyGrid => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?,
        None => RunConfig::demo(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(backend) = cli.backend {
        for spec in cfg.bidders.iter_mut().filter(|b| b.mode == BidderMode::Agent) {
            spec.backend = match backend {
                BackendArg::StubZero => BackendSpec::StubZero,
                BackendArg::StubPacing => BackendSpec::StubPacing,
                // Keep a configured http endpoint; otherwise use defaults.
                BackendArg::Http => match &spec.backend {
                    BackendSpec::Http(http) => BackendSpec::Http(http.clone()),
                    _ => BackendSpec::Http(Default::default()),
                },
            };
        }
    }
    cfg.resolve();
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn build_filter(cli: &Cli) -> Result<GridFilter, Failure> {
    let fraction = match &cli.fraction {
        Some(raw) => {
            Some(raw.parse().map_err(|e| Failure::Config(format!("--fraction {raw}: {e}")))?)
        }
        None => None,
    };
    let bidder = match &cli.bidder {
        Some(raw) => Some(
            raw.parse()
                .map_err(|_| Failure::Config(format!("--bidder {raw}: expected mcpc, lin, lp, or agent")))?,
        ),
        None => None,
    };
    Ok(GridFilter { campaign: cli.campaign.clone(), fraction, bidder })
}

fn admitted_campaigns<'a>(
    cfg: &'a RunConfig,
    filter: &GridFilter,
) -> Result<Vec<&'a CampaignSpec>, Failure> {
    let specs: Vec<&CampaignSpec> =
        cfg.campaigns.iter().filter(|c| filter.admits_campaign(&c.id)).collect();
    if specs.is_empty() {
        return Err(Failure::Config("--campaign matched no configured campaign".into()));
    }
    Ok(specs)
}

fn dispatch(cli: &Cli) -> Result<ExitCode, Failure> {
    let cfg = build_config(cli)?;
    let filter = build_filter(cli)?;
    match cli.command {
        Command::PrepareData => prepare_data(&cfg, &filter),
        Command::TrainCtr => train_ctr(&cfg, &filter),
        Command::FitStrategy => fit_strategies(&cfg, &filter),
        Command::Run => run(&cfg, &filter),
        Command::Report => report(&cfg),
        Command::Curves => curves(&cfg),
    }
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<(), Failure> {
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", cfg.out_dir.display())))
}

fn prepare_data(cfg: &RunConfig, filter: &GridFilter) -> Result<ExitCode, Failure> {
    ensure_out_dir(cfg)?;
    let mut failures = 0usize;
    for spec in admitted_campaigns(cfg, filter)? {
        match load_campaign_dataset(cfg, spec) {
            Ok(dataset) => {
                let dir = cfg.out_dir.join(&spec.id);
                std::fs::create_dir_all(&dir)
                    .map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
                let path = dir.join("events.jsonl");
                let mut events = dataset.train.clone();
                events.extend(
                    dataset.test_days.iter().flat_map(|d| d.steps.iter().flatten().cloned()),
                );
                write_events_jsonl(&path, &events).map_err(|e| Failure::Runtime(e.to_string()))?;
                println!(
                    "{}: {} train events (cost {}, clicks {}), {} test days ({} impressions) -> {}",
                    spec.id,
                    dataset.train.len(),
                    dataset.train_cost,
                    dataset.train_clicks,
                    dataset.test_days.len(),
                    dataset.test_impressions(),
                    path.display()
                );
            }
            Err(e) => {
                eprintln!("{}: FAILED: {e}", spec.id);
                failures += 1;
            }
        }
    }
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn train_ctr(cfg: &RunConfig, filter: &GridFilter) -> Result<ExitCode, Failure> {
    ensure_out_dir(cfg)?;
    let mut failures = 0usize;
    for spec in admitted_campaigns(cfg, filter)? {
        let outcome = load_campaign_dataset(cfg, spec).and_then(|dataset| {
            let wrap = |source| HarnessError::Ctr { id: spec.id.clone(), source };
            let indexer = FeatureIndexer::new(cfg.train.hash_bits).map_err(wrap)?;
            let trained = train(&dataset.train, indexer, &cfg.train.fm).map_err(wrap)?;
            let path = model_path(cfg, &spec.id);
            save_model(&path, &trained, &cfg.train.fm).map_err(wrap)?;
            Ok((trained, path))
        });
        match outcome {
            Ok((trained, path)) => println!(
                "{}: {} epochs, final log loss {:.6} -> {}",
                spec.id,
                trained.epoch_losses.len(),
                trained.final_log_loss,
                path.display()
            ),
            Err(e) => {
                eprintln!("{}: FAILED: {e}", spec.id);
                failures += 1;
            }
        }
    }
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn fit_strategies(cfg: &RunConfig, filter: &GridFilter) -> Result<ExitCode, Failure> {
    ensure_out_dir(cfg)?;
    let mut strategies: Vec<StrategyKind> = Vec::new();
    for spec in cfg.bidders.iter().filter(|b| filter.admits_bidder(b)) {
        if !strategies.contains(&spec.strategy) {
            strategies.push(spec.strategy);
        }
    }
    if strategies.is_empty() {
        return Err(Failure::Config("--bidder matched no configured bidder".into()));
    }
    let mut failures = 0usize;
    println!("campaign fraction strategy lambda_base");
    for spec in admitted_campaigns(cfg, filter)? {
        let prep = match prepare_campaign(cfg, spec) {
            Ok(prep) => prep,
            Err(e) => {
                eprintln!("{}: FAILED: {e}", spec.id);
                failures += 1;
                continue;
            }
        };
        for &fraction in cfg.fractions.iter().filter(|&&f| filter.admits_fraction(f)) {
            for &kind in &strategies {
                match fit_strategy(kind, &prep.dataset, &prep.model, fraction) {
                    Ok(fit) => {
                        println!("{} {} {} {}", spec.id, fraction, kind, fit.lambda_base)
                    }
                    Err(e) => {
                        eprintln!("{} {} {}: FAILED: {e}", spec.id, fraction, kind);
                        failures += 1;
                    }
                }
            }
        }
    }
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn run(cfg: &RunConfig, filter: &GridFilter) -> Result<ExitCode, Failure> {
    let result = run_grid(cfg, filter)?;
    for cell in &result.cells {
        match (&cell.stats, &cell.error) {
            (Some(s), _) => println!(
                "ok   {} {} {}: clicks={} cost={} wins={} budget={}",
                cell.campaign,
                cell.fraction,
                cell.bidder,
                s.clicks,
                s.cost,
                s.wins,
                s.budget_total
            ),
            (None, Some(e)) => {
                println!("FAIL {} {} {}: {e}", cell.campaign, cell.fraction, cell.bidder)
            }
            (None, None) => unreachable!("cell without stats or error"),
        }
    }
    println!("artifacts in {}", cfg.out_dir.display());
    let failed = result.failed().len();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", result.cells.len());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

/// For report/curves the stored resolved config is the source of truth for
/// grid shape; the current CLI's out dir says where the run lives.
fn stored_config(cfg: &RunConfig) -> Result<RunConfig, Failure> {
    let path = cfg.out_dir.join(RESOLVED_CONFIG_FILE);
    let mut stored = if path.is_file() {
        RunConfig::load(&path).map_err(|e| Failure::Config(e.to_string()))?
    } else {
        cfg.clone()
    };
    stored.out_dir = cfg.out_dir.clone();
    Ok(stored)
}

fn report(cfg: &RunConfig) -> Result<ExitCode, Failure> {
    let cfg = stored_config(cfg)?;
    let result = RunResult::load(&cfg.out_dir)?;
    let report_path = cfg.out_dir.join("report.csv");
    let fractions = present_fractions(&cfg.fractions, &result.cells);
    write_report_csv(&report_path, &result.cells, &fractions)?;
    let compare_path = cfg.out_dir.join("compare.csv");
    write_compare_csv(&compare_path, &result.cells)?;
    println!("wrote {}", report_path.display());
    println!("wrote {}", compare_path.display());
    Ok(ExitCode::SUCCESS)
}

fn curves(cfg: &RunConfig) -> Result<ExitCode, Failure> {
    let cfg = stored_config(cfg)?;
    let result = RunResult::load(&cfg.out_dir)?;
    let mut seen = Vec::new();
    for cell in result.cells.iter().filter(|c| c.ok()) {
        let key = (cell.campaign.clone(), cell.fraction);
        if !seen.contains(&key) {
            write_curves_csv(&cfg.out_dir, &key.0, key.1, &result.cells)?;
            println!(
                "wrote {}",
                cfg.out_dir
                    .join(format!("curves_{}_{}.csv", key.0, key.1.file_tag()))
                    .display()
            );
            seen.push(key);
        }
    }
    if seen.is_empty() {
        eprintln!("no successful cells to plot");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
