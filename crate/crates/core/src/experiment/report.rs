//! Aggregation of `metrics.csv` into the per-class summary table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, ExperimentError, MetricsRow, RunManifest};

/// Profile classes in table column order.
const CLASS_ORDER: [&str; 3] = ["invariant", "strictly_better", "varying"];

/// Mean and spread of one (policy, profile class) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy_kind: String,
    pub profile_class: String,
    pub profiles: usize,
    pub runs: usize,
    pub mean_excess_loss: f64,
    /// Sample standard deviation across profiles of the per-profile mean;
    /// across runs when only one profile is present.
    pub sd_excess_loss: f64,
    pub mean_expected_loss: f64,
    pub mean_expected_cost: f64,
    pub winner: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub protocol: Option<String>,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn row(&self, policy: &str, class: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.policy_kind == policy && r.profile_class == class)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Groups rows by (policy, class) in first-appearance order of policies.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut policies: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<(&str, &str), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        if !policies.contains(&r.policy_kind.as_str()) {
            policies.push(&r.policy_kind);
        }
        groups.entry((&r.policy_kind, &r.profile_class)).or_default().push(r);
    }
    let mut classes: Vec<&str> = groups.keys().map(|(_, c)| *c).collect();
    classes.sort_by_key(|c| (CLASS_ORDER.iter().position(|k| k == c).unwrap_or(CLASS_ORDER.len()), *c));
    classes.dedup();

    let mut out = Vec::new();
    for class in &classes {
        let start = out.len();
        for policy in &policies {
            let Some(group) = groups.get(&(*policy, *class)) else { continue };
            let mut per_profile: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for r in group {
                per_profile.entry(&r.profile).or_default().push(r.excess_loss);
            }
            let profile_means: Vec<f64> = per_profile.values().map(|v| mean(v)).collect();
            let excess: Vec<f64> = group.iter().map(|r| r.excess_loss).collect();
            let sd = if profile_means.len() >= 2 { sample_sd(&profile_means) } else { sample_sd(&excess) };
            out.push(SummaryRow {
                policy_kind: policy.to_string(),
                profile_class: class.to_string(),
                profiles: profile_means.len(),
                runs: group.len(),
                mean_excess_loss: mean(&profile_means),
                sd_excess_loss: sd,
                mean_expected_loss: mean(&group.iter().map(|r| r.expected_loss).collect::<Vec<_>>()),
                mean_expected_cost: mean(&group.iter().map(|r| r.expected_cost).collect::<Vec<_>>()),
                winner: false,
            });
        }
        let contenders = || out[start..].iter().enumerate().filter(|(_, r)| r.policy_kind != "oracle");
        let best = contenders().map(|(_, r)| r.mean_excess_loss).fold(f64::INFINITY, f64::min);
        let winners: Vec<usize> = contenders().filter(|(_, r)| r.mean_excess_loss == best).map(|(i, _)| i).collect();
        if winners.len() == 1 {
            out[start + winners[0]].winner = true;
        }
    }
    out
}

/// Table with one row per policy and one column per profile class.
pub fn render_table(summary: &Summary) -> String {
    let mut policies: Vec<&str> = Vec::new();
    let mut classes: Vec<&str> = Vec::new();
    for r in &summary.rows {
        if !policies.contains(&r.policy_kind.as_str()) {
            policies.push(&r.policy_kind);
        }
        if !classes.contains(&r.profile_class.as_str()) {
            classes.push(&r.profile_class);
        }
    }
    let width = policies.iter().map(|p| p.len()).max().unwrap_or(6).max(6);
    let mut s = String::new();
    if let Some(p) = &summary.protocol {
        let _ = writeln!(s, "evaluation: {p}");
    }
    let _ = writeln!(s, "excess loss, mean ± sd across profiles (* = lowest per class)");
    let _ = write!(s, "{:width$}", "policy");
    for c in &classes {
        let _ = write!(s, "  {c:>16}");
    }
    s.push('\n');
    for p in &policies {
        let _ = write!(s, "{p:width$}");
        for c in &classes {
            let cell = match summary.row(p, c) {
                Some(r) => format!(
                    "{:.2} ± {:.2}{}",
                    r.mean_excess_loss,
                    r.sd_excess_loss,
                    if r.winner { "*" } else { " " }
                ),
                None => "-".into(),
            };
            let _ = write!(s, "  {cell:>16}");
        }
        s.push('\n');
    }
    s
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, ExperimentError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| ExperimentError::Metrics(e.to_string()))?;
    reader
        .deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(|e| ExperimentError::Metrics(e.to_string()))
}

/// Reads `dir/metrics.csv` and writes `summary.txt` and `summary.json`.
pub fn emit_report(dir: &Path) -> Result<Summary, ExperimentError> {
    let metrics = dir.join("metrics.csv");
    if !metrics.is_file() {
        return Err(ExperimentError::NoMetricsFound(dir.to_path_buf()));
    }
    let rows = read_metrics(&metrics)?;
    if rows.is_empty() {
        return Err(ExperimentError::NoMetricsFound(dir.to_path_buf()));
    }
    let protocol = fs::read_to_string(dir.join("run.json"))
        .ok()
        .and_then(|raw| serde_json::from_str::<RunManifest>(&raw).ok())
        .map(|m| match m.protocol {
            super::EvalProtocol::Trailing => format!("trailing window, last {} of {} steps", m.window, m.horizon),
            super::EvalProtocol::Heldout => format!("held-out set of {} items, final policy", m.heldout_size),
        });
    let summary = Summary { protocol, rows: summarize(&rows) };
    let text = render_table(&summary);
    let txt = dir.join("summary.txt");
    fs::write(&txt, text).map_err(io_err(&txt))?;
    let json = dir.join("summary.json");
    let body = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&json, body + "\n").map_err(io_err(&json))?;
    Ok(summary)
}
