//! Report files.
//!
//! `results.csv` has one row per (method, seed, target task) with columns
//! `method,seed,target_task,accuracy,mean_inner_loss,wallclock_s`, preceded by
//! the run configuration as `# key = value` lines. `summary.csv` aggregates the
//! rows per method. `gates.jsonl` holds one JSON object per gate-trajectory
//! point. Numbers use the shortest representation that reads back exactly, so
//! equal results always give equal bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::runner::{CellResult, GatePoint};

pub const RESULTS_HEADER: &str = "method,seed,target_task,accuracy,mean_inner_loss,wallclock_s";
pub const SUMMARY_HEADER: &str = "method,rows,mean_accuracy,std_accuracy,mean_inner_loss";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub seed: u64,
    pub target_task: usize,
    pub accuracy: f64,
    pub mean_inner_loss: f64,
    pub wallclock_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub rows: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation; 0 for a single row.
    pub std_accuracy: f64,
    pub mean_inner_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateLine {
    pub method: String,
    pub seed: u64,
    /// `episode`, `step` or `final`.
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_loss: Option<f64>,
    pub lambda: Vec<f64>,
}

pub fn result_rows(cells: &[CellResult]) -> Vec<ResultRow> {
    cells
        .iter()
        .flat_map(|c| {
            c.accuracy.iter().map(move |&(target_task, accuracy)| ResultRow {
                method: c.method.name(),
                seed: c.seed,
                target_task,
                accuracy,
                mean_inner_loss: c.mean_inner_loss,
                wallclock_s: c.wallclock_s,
            })
        })
        .collect()
}

pub fn gate_lines(cells: &[CellResult]) -> Vec<GateLine> {
    let mut lines = Vec::new();
    for c in cells {
        for p in &c.gates {
            let (kind, index, held_out, test_loss, lambda) = match p {
                GatePoint::Episode { index, held_out, test_loss, lambda } => {
                    ("episode", Some(*index), Some(*held_out), Some(*test_loss), lambda)
                }
                GatePoint::Step { index, lambda } => ("step", Some(*index), None, None, lambda),
                GatePoint::Final { lambda } => ("final", None, None, None, lambda),
            };
            lines.push(GateLine {
                method: c.method.name(),
                seed: c.seed,
                kind: kind.into(),
                index,
                held_out,
                test_loss,
                lambda: lambda.clone(),
            });
        }
    }
    lines
}

/// Per-method aggregates, methods in order of first appearance.
pub fn summarize(rows: &[ResultRow]) -> Result<Vec<SummaryRow>> {
    ensure!(!rows.is_empty(), "no result rows to summarize");
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(r.method.as_str()) {
            order.push(&r.method);
        }
        groups.entry(&r.method).or_default().push(r);
    }
    Ok(order
        .into_iter()
        .map(|m| {
            let g = &groups[m];
            let n = g.len() as f64;
            let mean = g.iter().map(|r| r.accuracy).sum::<f64>() / n;
            let var = if g.len() > 1 { g.iter().map(|r| (r.accuracy - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            SummaryRow {
                method: m.into(),
                rows: g.len(),
                mean_accuracy: mean,
                std_accuracy: var.sqrt(),
                mean_inner_loss: g.iter().map(|r| r.mean_inner_loss).sum::<f64>() / n,
            }
        })
        .collect())
}

/// The configuration echo. The output directory is left out so that a rerun
/// into another directory produces the same bytes.
fn config_header(cfg: &RunConfig) -> String {
    let mut out = String::new();
    for (k, v) in cfg.entries().into_iter().filter(|(k, _)| *k != "out_dir") {
        let _ = writeln!(out, "# {k} = {v}");
    }
    out
}

pub fn results_csv(cfg: &RunConfig, rows: &[ResultRow]) -> Result<String> {
    ensure!(!rows.is_empty(), "no result rows to write");
    let mut out = config_header(cfg);
    out.push_str(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let wall = r.wallclock_s.map_or_else(|| "NA".to_string(), |w| w.to_string());
        let _ = writeln!(out, "{},{},{},{},{},{}", r.method, r.seed, r.target_task, r.accuracy, r.mean_inner_loss, wall);
    }
    Ok(out)
}

pub fn summary_csv(summary: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in summary {
        let _ = writeln!(out, "{},{},{},{},{}", s.method, s.rows, s.mean_accuracy, s.std_accuracy, s.mean_inner_loss);
    }
    out
}

pub fn gates_jsonl(lines: &[GateLine]) -> Result<String> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    Ok(out)
}

/// Reads the rows of a `results.csv`, skipping the configuration header.
pub fn parse_results(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h == RESULTS_HEADER => {}
        Some((i, h)) => bail!("line {}: expected header `{RESULTS_HEADER}`, found `{h}`", i + 1),
        None => bail!("results file has no header"),
    }
    lines
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            ensure!(f.len() == 6, "line {}: expected 6 fields, found {}", i + 1, f.len());
            let ctx = |name: &str| format!("line {}: bad {name}", i + 1);
            Ok(ResultRow {
                method: f[0].to_string(),
                seed: f[1].parse().with_context(|| ctx("seed"))?,
                target_task: f[2].parse().with_context(|| ctx("target_task"))?,
                accuracy: f[3].parse().with_context(|| ctx("accuracy"))?,
                mean_inner_loss: f[4].parse().with_context(|| ctx("mean_inner_loss"))?,
                wallclock_s: if f[5] == "NA" { None } else { Some(f[5].parse().with_context(|| ctx("wallclock_s"))?) },
            })
        })
        .collect()
}

/// Writes `results.csv`, `summary.csv` and `gates.jsonl` into `dir`.
pub fn emit_report(dir: &Path, cfg: &RunConfig, cells: &[CellResult]) -> Result<Vec<SummaryRow>> {
    let rows = result_rows(cells);
    let results = results_csv(cfg, &rows)?;
    let summary = summarize(&rows)?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("results.csv"), results)?;
    std::fs::write(dir.join("summary.csv"), summary_csv(&summary))?;
    std::fs::write(dir.join("gates.jsonl"), gates_jsonl(&gate_lines(cells))?)?;
    Ok(summary)
}
