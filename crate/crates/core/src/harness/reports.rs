//! Run-level summary files: the clicks grid, baseline-vs-agent deltas, and
//! per-step budget/CPC curves.

use std::path::Path;

use crate::dataset::BudgetFraction;

use super::config::{BidderMode, RunConfig};
use super::runner::{read_steps_csv, CellResult, HarnessError, RunResult};

/// Relative click change in percent; `None` when the baseline had none.
pub fn percent_improvement(baseline_clicks: u64, agent_clicks: u64) -> Option<f64> {
    if baseline_clicks == 0 {
        return None;
    }
    let b = baseline_clicks as f64;
    Some((agent_clicks as f64 - b) / b * 100.0)
}

pub fn format_percent(p: f64) -> String {
    format!("{p:+.2}%")
}

fn csv_err(path: &Path, source: csv::Error) -> HarnessError {
    HarnessError::Csv { path: path.to_path_buf(), source: Box::new(source) }
}

/// The configured fractions that actually occupy at least one cell, in
/// config order. A filtered run reports only the columns it touched.
pub fn present_fractions(fractions: &[BudgetFraction], cells: &[CellResult]) -> Vec<BudgetFraction> {
    fractions
        .iter()
        .copied()
        .filter(|f| cells.iter().any(|c| c.fraction == *f))
        .collect()
}

/// Clicks grid: one row per (campaign, bidder), one column per fraction.
/// Failed or unfilled cells stay empty.
pub fn write_report_csv(
    path: &Path,
    cells: &[CellResult],
    fractions: &[BudgetFraction],
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["campaign".to_string(), "bidder".to_string()];
    header.extend(fractions.iter().map(|f| f.to_string()));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;

    let mut rows: Vec<(&str, &str)> = Vec::new();
    for c in cells {
        let key = (c.campaign.as_str(), c.bidder.as_str());
        if !rows.contains(&key) {
            rows.push(key);
        }
    }
    for (campaign, bidder) in rows {
        let mut record = vec![campaign.to_string(), bidder.to_string()];
        for f in fractions {
            let clicks = cells
                .iter()
                .find(|c| c.campaign == campaign && c.bidder == bidder && c.fraction == *f)
                .and_then(CellResult::clicks);
            record.push(clicks.map_or(String::new(), |n| n.to_string()));
        }
        w.write_record(&record).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

/// One row per agent cell that has a same-strategy baseline in the same
/// campaign and fraction.
pub fn write_compare_csv(path: &Path, cells: &[CellResult]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "campaign",
        "strategy",
        "fraction",
        "baseline_clicks",
        "agent_bidder",
        "agent_clicks",
        "delta",
        "percent",
    ])
    .map_err(|e| csv_err(path, e))?;

    for agent in cells.iter().filter(|c| c.mode == BidderMode::Agent) {
        let baseline = cells.iter().find(|c| {
            c.mode == BidderMode::Baseline
                && c.campaign == agent.campaign
                && c.strategy == agent.strategy
                && c.fraction == agent.fraction
        });
        let Some(baseline) = baseline else { continue };
        let (Some(b), Some(a)) = (baseline.clicks(), agent.clicks()) else { continue };
        let percent = percent_improvement(b, a);
        w.write_record([
            agent.campaign.clone(),
            agent.strategy.to_string(),
            agent.fraction.to_string(),
            b.to_string(),
            agent.bidder.clone(),
            a.to_string(),
            (a as i64 - b as i64).to_string(),
            percent.map_or("n/a".to_string(), format_percent),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

/// Per-step remaining budget and cumulative CPC for every bidder of one
/// (campaign, fraction), read back from the cells' step files.
pub fn write_curves_csv(
    out_dir: &Path,
    campaign: &str,
    fraction: BudgetFraction,
    cells: &[CellResult],
) -> Result<(), HarnessError> {
    let path = out_dir.join(format!("curves_{campaign}_{}.csv", fraction.file_tag()));
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["bidder", "day", "step", "remaining_budget", "cpc"])
        .map_err(|e| csv_err(&path, e))?;
    for cell in cells {
        if !(cell.campaign == campaign && cell.fraction == fraction && cell.ok()) {
            continue;
        }
        for row in read_steps_csv(&cell.steps_csv_path(out_dir))? {
            w.write_record([
                cell.bidder.clone(),
                row.day.to_string(),
                row.step.to_string(),
                row.remaining_budget.to_string(),
                row.cpc.map_or(String::new(), |v| v.to_string()),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| HarnessError::Io { path, source: e })?;
    Ok(())
}

/// Writes report.csv, compare.csv, and one curves file per (campaign,
/// fraction) that produced at least one successful cell.
pub fn write_run_reports(cfg: &RunConfig, result: &RunResult) -> Result<(), HarnessError> {
    let fractions = present_fractions(&cfg.fractions, &result.cells);
    write_report_csv(&cfg.out_dir.join("report.csv"), &result.cells, &fractions)?;
    write_compare_csv(&cfg.out_dir.join("compare.csv"), &result.cells)?;
    let mut seen: Vec<(String, BudgetFraction)> = Vec::new();
    for cell in result.cells.iter().filter(|c| c.ok()) {
        let key = (cell.campaign.clone(), cell.fraction);
        if !seen.contains(&key) {
            seen.push(key.clone());
            write_curves_csv(&cfg.out_dir, &key.0, key.1, &result.cells)?;
        }
    }
    Ok(())
}
