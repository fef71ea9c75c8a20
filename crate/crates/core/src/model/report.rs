//! Role-specific final reports carried inside a [`ChildResult`](super::ChildResult).

use serde::{Deserialize, Serialize};

use super::{AgentType, Finding, ObjectKind, TraceStep};

/// Aggregated findings from a directory subtree.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectoryReport {
    #[serde(default)]
    pub findings: Vec<Finding>,
    /// Entries the agent saw but did not analyze.
    #[serde(default)]
    pub unexplored: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
}

/// File-level findings in the knowledge-hub schema.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileReport {
    #[serde(default)]
    pub findings: Vec<Finding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
}

/// Call-chain report from a function agent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionReport {
    #[serde(default)]
    pub summary: String,
    /// Vulnerability class, e.g. "CWE-78 command injection". Absent when the
    /// taint did not reach a sink.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<String>,
    /// Source-to-sink propagation path, forward order.
    #[serde(default)]
    pub trace: Vec<TraceStep>,
    /// Where and why tracing stopped, when it did not reach a sink.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_point: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum ReportPayload {
    Directory(DirectoryReport),
    File(FileReport),
    Function(FunctionReport),
}

impl ReportPayload {
    pub fn empty(agent_type: AgentType) -> Self {
        match agent_type {
            ObjectKind::Directory => ReportPayload::Directory(DirectoryReport::default()),
            ObjectKind::File => ReportPayload::File(FileReport::default()),
            ObjectKind::Function => ReportPayload::Function(FunctionReport::default()),
        }
    }

    pub fn agent_type(&self) -> AgentType {
        match self {
            ReportPayload::Directory(_) => ObjectKind::Directory,
            ReportPayload::File(_) => ObjectKind::File,
            ReportPayload::Function(_) => ObjectKind::Function,
        }
    }

    /// Parses a `finish` payload for the given role.
    pub fn parse_for(agent_type: AgentType, value: &serde_json::Value) -> Result<Self, serde_json::Error> {
        use serde_json::from_value;
        Ok(match agent_type {
            ObjectKind::Directory => ReportPayload::Directory(from_value(value.clone())?),
            ObjectKind::File => ReportPayload::File(from_value(value.clone())?),
            ObjectKind::Function => ReportPayload::Function(from_value(value.clone())?),
        })
    }

    /// Findings carried by file and directory reports.
    pub fn findings(&self) -> &[Finding] {
        match self {
            ReportPayload::Directory(d) => &d.findings,
            ReportPayload::File(f) => &f.findings,
            ReportPayload::Function(_) => &[],
        }
    }
}
