use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{run_task, HarnessError, RunConfig, RunReport, TaskPreset};
use crate::hub::{dedup_key, DedupKey};
use crate::llm::BackendHandle;

/// |A∩B| / |A∪B|, with two empty sets counting as identical.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// The alert set of a report, keyed the way the hub deduplicates.
pub fn alert_keys(report: &RunReport) -> BTreeSet<DedupKey> {
    report.alert_findings().map(dedup_key).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        if values.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityEntry {
    pub firmware: String,
    pub task: String,
    pub runs: usize,
    pub agent_count: MeanStd,
    pub alerts: MeanStd,
    /// Pairwise Jaccard over runs (i, j), i < j, in row-major order.
    pub jaccard: Vec<f64>,
    pub jaccard_mean: f64,
    pub jaccard_min: f64,
    /// Runs whose root agent failed.
    pub failed_runs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub entries: Vec<StabilityEntry>,
}

impl StabilityEntry {
    fn from_reports(firmware: String, task: String, reports: &[RunReport], failed_runs: usize) -> Self {
        let agents: Vec<f64> = reports.iter().map(|r| r.metrics.agent_count as f64).collect();
        let alerts: Vec<f64> = reports.iter().map(|r| r.alerts.len() as f64).collect();
        let keys: Vec<_> = reports.iter().map(alert_keys).collect();
        let mut pairs = Vec::new();
        for i in 0..keys.len() {
            for j in i + 1..keys.len() {
                pairs.push(jaccard(&keys[i], &keys[j]));
            }
        }
        let jaccard_mean = if pairs.is_empty() { 1.0 } else { pairs.iter().sum::<f64>() / pairs.len() as f64 };
        let jaccard_min = pairs.iter().copied().fold(1.0, f64::min);
        StabilityEntry {
            firmware,
            task,
            runs: reports.len(),
            agent_count: MeanStd::of(&agents),
            alerts: MeanStd::of(&alerts),
            jaccard: pairs,
            jaccard_mean,
            jaccard_min,
            failed_runs,
        }
    }
}

/// Runs `preset` `runs` times over every firmware root, each run with its
/// own fresh hub under `out`. `handle_for(firmware, run_index)` supplies the
/// backend for each run.
pub fn stability_suite(
    firmwares: &[PathBuf],
    preset: &TaskPreset,
    runs: usize,
    config: &RunConfig,
    mut handle_for: impl FnMut(&Path, usize) -> BackendHandle,
    out: &Path,
) -> Result<StabilityReport, HarnessError> {
    if runs < 2 {
        return Err(HarnessError::Precondition(format!("stability needs at least 2 runs, got {runs}")));
    }
    let mut report = StabilityReport::default();
    for (fi, fw) in firmwares.iter().enumerate() {
        let name = fw
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("fw{fi}"));
        let mut reports = Vec::with_capacity(runs);
        let mut failed = 0;
        for i in 0..runs {
            let run_out = out.join(format!("{fi:02}-{name}")).join(format!("run-{i:02}"));
            let mut cfg = config.clone();
            cfg.fresh_pkh = true;
            cfg.pkh_dir = Some(run_out.join("pkh"));
            let handle = handle_for(fw, i);
            match run_task(fw, preset, &cfg, &handle, &run_out) {
                Ok(r) => reports.push(r),
                Err(HarnessError::RootFailure { report, .. }) => {
                    failed += 1;
                    reports.push(*report);
                }
                Err(e) => return Err(e),
            }
        }
        report
            .entries
            .push(StabilityEntry::from_reports(name, preset.id.clone(), &reports, failed));
    }
    let path = out.join("stability.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| HarnessError::io(&path, e.into()))?;
    std::fs::write(&path, text + "\n").map_err(|e| HarnessError::io(&path, e))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdfMetric {
    AgentCount,
    Depth,
    MaxBranch,
}

impl CdfMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            CdfMetric::AgentCount => "agent_count",
            CdfMetric::Depth => "depth",
            CdfMetric::MaxBranch => "max_branch",
        }
    }

    fn value(self, r: &RunReport) -> u64 {
        match self {
            CdfMetric::AgentCount => r.metrics.agent_count as u64,
            CdfMetric::Depth => r.metrics.max_depth as u64,
            CdfMetric::MaxBranch => r.metrics.max_branch as u64,
        }
    }
}

impl std::str::FromStr for CdfMetric {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "agent_count" | "agents" => Ok(CdfMetric::AgentCount),
            "depth" | "max_depth" => Ok(CdfMetric::Depth),
            "max_branch" | "branch" => Ok(CdfMetric::MaxBranch),
            other => Err(HarnessError::Config(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub value: u64,
    pub fraction: f64,
}

/// Empirical CDF: one row per report in ascending value order, each with
/// the fraction of reports whose value is at most that value.
pub fn metrics_cdf(reports: &[RunReport], metric: CdfMetric) -> Result<Vec<CdfRow>, HarnessError> {
    if reports.is_empty() {
        return Err(HarnessError::Precondition("no reports".into()));
    }
    let mut values: Vec<u64> = reports.iter().map(|r| metric.value(r)).collect();
    values.sort_unstable();
    let n = values.len() as f64;
    Ok(values
        .iter()
        .map(|&v| CdfRow {
            value: v,
            fraction: values.partition_point(|&x| x <= v) as f64 / n,
        })
        .collect())
}

pub fn cdf_csv(rows: &[CdfRow], metric: CdfMetric) -> String {
    let mut s = format!("{},fraction\n", metric.as_str());
    for r in rows {
        s.push_str(&format!("{},{}\n", r.value, r.fraction));
    }
    s
}
