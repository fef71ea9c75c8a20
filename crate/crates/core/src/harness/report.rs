use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{HarnessError, RunConfig, TaskPreset};
use crate::engine::{canonicalize, run_root, write_run_artifacts, EngineError, RunMetrics, ToARun};
use crate::hub::{dedup_key, HubRecord, KnowledgeHub};
use crate::llm::BackendHandle;
use crate::model::{epoch, AgentId, AgentType, Budget, Finding, NodeState, ObjectRef, ReportPayload, ResultStatus, TokenUsage, ToolId};

pub const REPORT_FILE: &str = "report.json";
pub const PKH_SLICE_FILE: &str = "pkh.ndjson";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    /// Name of the firmware root directory.
    pub firmware: String,
    pub task: String,
    pub prompt: String,
    pub backend: String,
    pub budget: Budget,
    pub seed: u64,
    pub temperature: f64,
    pub run_id: String,
    pub started_at: DateTime<Utc>,
}

/// A knowledge-hub record attributed to this run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<u64>,
    pub agent_id: String,
    pub corroborated: bool,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub enrichment_refs: BTreeSet<u64>,
    pub finding: Finding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTally {
    pub agent_id: AgentId,
    pub agent_type: AgentType,
    pub object: ObjectRef,
    pub depth: u32,
    pub state: NodeState,
    pub steps: u32,
    pub tools: BTreeMap<ToolId, u32>,
    pub tokens: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub metadata: RunMetadata,
    pub status: ResultStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    pub alerts: Vec<Alert>,
    pub metrics: RunMetrics,
    pub agents: Vec<AgentTally>,
    pub report: ReportPayload,
}

impl RunReport {
    fn build(run: &ToARun, metadata: RunMetadata, records: Vec<HubRecord>, canonical: bool) -> RunReport {
        let mut alerts: Vec<Alert> = records
            .into_iter()
            .map(|r| Alert {
                record_id: Some(r.record_id),
                agent_id: r.agent_id,
                corroborated: r.corroborated,
                enrichment_refs: r.enrichment_refs,
                finding: r.finding,
            })
            .collect();
        let agents = run
            .nodes
            .values()
            .map(|n| AgentTally {
                agent_id: n.agent_id.clone(),
                agent_type: n.agent_type,
                object: n.task.object.clone(),
                depth: n.depth,
                state: n.state,
                steps: n.steps_used,
                tools: run.tool_tallies.get(&n.agent_id).cloned().unwrap_or_default(),
                tokens: n.tokens,
            })
            .collect();
        let mut metadata = metadata;
        if canonical {
            metadata.started_at = epoch();
            for a in &mut alerts {
                a.record_id = None;
                a.enrichment_refs.clear();
                for ev in &mut a.finding.evidence {
                    ev.timestamp = epoch();
                }
            }
            alerts.sort_by(|a, b| {
                dedup_key(&a.finding)
                    .cmp(&dedup_key(&b.finding))
                    .then_with(|| a.agent_id.cmp(&b.agent_id))
            });
        }
        RunReport {
            metadata,
            status: run.report.status,
            explanation: run.report.explanation.clone(),
            alerts,
            metrics: run.metrics.clone(),
            agents,
            report: run.report.payload.clone(),
        }
    }

    pub fn alert_findings(&self) -> impl Iterator<Item = &Finding> {
        self.alerts.iter().map(|a| &a.finding)
    }
}

/// Runs one task over `firmware_root` and writes `report.json`,
/// `metrics.json`, `events.ndjson`, `toa.json` and this run's slice of the
/// knowledge hub into `out`. The hub lives in `config.pkh_dir`, or in
/// `out/pkh` when unset.
pub fn run_task(
    firmware_root: &Path,
    preset: &TaskPreset,
    config: &RunConfig,
    handle: &BackendHandle,
    out: &Path,
) -> Result<RunReport, HarnessError> {
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let run_id = format!("{}-{}", preset.id.to_lowercase(), handle.seed());
    let setup = config.run_setup(firmware_root, &out.join("pkh"), &run_id)?;
    let hub_dir = setup.hub.dir().to_path_buf();
    let firmware = setup
        .tools
        .root()
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let handle = handle.fresh_run();
    let (run, root_failure) = match run_root(setup, &preset.prompt, config.budget, &handle) {
        Ok(run) => (run, None),
        Err(EngineError::RootFailure { explanation, run }) => (*run, Some(explanation)),
        Err(e) => return Err(e.into()),
    };

    let ids: BTreeSet<u64> = run.alerts.iter().copied().collect();
    let records: Vec<HubRecord> = KnowledgeHub::open(&hub_dir)?
        .records()?
        .into_iter()
        .filter(|r| ids.contains(&r.record_id))
        .collect();
    write_slice(&out.join(PKH_SLICE_FILE), &records)?;

    let metadata = RunMetadata {
        firmware,
        task: preset.id.clone(),
        prompt: preset.prompt.clone(),
        backend: handle.describe(),
        budget: run.budget,
        seed: handle.seed(),
        temperature: handle.temperature(),
        run_id: run.run_id.clone(),
        started_at: run.started_at,
    };
    let shown = if config.canonical { canonicalize(&run) } else { run.clone() };
    let report = RunReport::build(&shown, metadata, records, config.canonical);
    write_run_artifacts(&run, out, config.canonical).map_err(|e| HarnessError::io(out, e))?;
    let path = out.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(&report).map_err(|e| HarnessError::io(&path, e.into()))?;
    std::fs::write(&path, text + "\n").map_err(|e| HarnessError::io(&path, e))?;

    match root_failure {
        Some(explanation) => Err(HarnessError::RootFailure {
            explanation,
            report: Box::new(report),
        }),
        None => Ok(report),
    }
}

fn write_slice(path: &Path, records: &[HubRecord]) -> Result<(), HarnessError> {
    let io = |e: std::io::Error| HarnessError::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| io(e.into()))?;
        f.write_all(b"\n").map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedPolicy;

    #[test]
    fn empty_tree_yields_single_agent_and_no_alerts() {
        let fw = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let preset = TaskPreset::builtin("T1").unwrap();
        let handle = BackendHandle::scripted(ScriptedPolicy::default(), 7);
        let report = run_task(fw.path(), &preset, &RunConfig::default(), &handle, out.path()).unwrap();
        assert_eq!(report.metrics.agent_count, 1);
        assert!(report.alerts.is_empty());
        assert_eq!(report.metadata.seed, 7);
        for f in [REPORT_FILE, PKH_SLICE_FILE, "metrics.json", "events.ndjson", "toa.json"] {
            assert!(out.path().join(f).is_file(), "{f}");
        }
    }
}
