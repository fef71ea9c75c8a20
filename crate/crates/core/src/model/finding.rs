//! Findings, evidence and call-chain trace steps.

use std::collections::BTreeSet;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::ObjectRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticType {
    Credential,
    ComponentVersion,
    EnvDataflow,
    WebAttackChain,
    Vulnerability,
    Misconfiguration,
    Other,
}

impl SemanticType {
    pub const ALL: [SemanticType; 7] = [
        SemanticType::Credential,
        SemanticType::ComponentVersion,
        SemanticType::EnvDataflow,
        SemanticType::WebAttackChain,
        SemanticType::Vulnerability,
        SemanticType::Misconfiguration,
        SemanticType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SemanticType::Credential => "credential",
            SemanticType::ComponentVersion => "component_version",
            SemanticType::EnvDataflow => "env_dataflow",
            SemanticType::WebAttackChain => "web_attack_chain",
            SemanticType::Vulnerability => "vulnerability",
            SemanticType::Misconfiguration => "misconfiguration",
            SemanticType::Other => "other",
        }
    }
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    Verified,
    Partial,
}

/// Provenance for one piece of a finding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Evidence {
    #[serde(default)]
    pub agent_id: String,
    pub tool: String,
    #[serde(default = "epoch")]
    pub timestamp: DateTime<Utc>,
    pub raw_snippet: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locator: Option<EvidenceLocator>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvidenceLocator {
    pub object: ObjectRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u64>,
}

/// Fixed timestamp used wherever canonical output replaces wall-clock time.
pub fn epoch() -> DateTime<Utc> {
    DateTime::<Utc>::UNIX_EPOCH
}

impl Evidence {
    /// Identity used when merging evidence lists; the timestamp is ignored so
    /// the same observation reported twice is not duplicated.
    pub fn merge_key(&self) -> (String, String, String, Option<EvidenceLocator>) {
        (
            self.agent_id.clone(),
            self.tool.clone(),
            self.raw_snippet.clone(),
            self.locator.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Param,
    Var,
    Call,
    Sink,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceStep {
    pub trace_kind: TraceKind,
    pub identifier: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<u64>,
    #[serde(default)]
    pub snippet: String,
}

/// One structured finding as stored in the knowledge hub.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub summary: String,
    pub location: ObjectRef,
    pub semantic_type: SemanticType,
    #[serde(default)]
    pub link_ids: BTreeSet<String>,
    #[serde(default)]
    pub evidence: Vec<Evidence>,
    pub confidence: Confidence,
    #[serde(default)]
    pub explanation: Option<String>,
    #[serde(default)]
    pub trace: Option<Vec<TraceStep>>,
}

/// Lowercase, trim, collapse internal whitespace.
pub fn normalize_link_id(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn normalize_whitespace(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Finding {
    /// Returns a copy with normalized link ids (empty ids dropped) and a
    /// lexically renormalized location.
    pub fn normalized(&self) -> Finding {
        let mut out = self.clone();
        out.link_ids = self
            .link_ids
            .iter()
            .map(|l| normalize_link_id(l))
            .filter(|l| !l.is_empty())
            .collect();
        if let Ok(loc) = self.location.renormalized() {
            out.location = loc;
        }
        out
    }
}

/// Violations found by [`validate_finding`]. Empty means acceptable.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, msg: impl Into<String>) {
        self.violations.push(msg.into());
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.violations.join("; "))
    }
}

/// Checks a finding against the evidence-first rule and schema invariants.
/// Never fails; every problem is reported.
pub fn validate_finding(f: &Finding) -> ValidationReport {
    let mut report = ValidationReport::default();
    if f.summary.trim().is_empty() {
        report.push("empty summary");
    }
    if let Err(e) = f.location.validate() {
        report.push(format!("invalid location: {e}"));
    }
    match f.confidence {
        Confidence::Verified => {
            if f.evidence.is_empty() {
                report.push("missing evidence");
            }
        }
        Confidence::Partial => {
            if f.explanation.as_deref().map_or(true, |e| e.trim().is_empty()) {
                report.push("partial finding without explanation");
            }
        }
    }
    for (i, ev) in f.evidence.iter().enumerate() {
        if ev.raw_snippet.trim().is_empty() {
            report.push(format!("evidence[{i}]: empty raw_snippet"));
        }
        if ev.tool.trim().is_empty() {
            report.push(format!("evidence[{i}]: empty tool"));
        }
    }
    for l in &f.link_ids {
        if *l != normalize_link_id(l) {
            report.push(format!("link id {l:?} not normalized"));
        }
    }
    if let Some(trace) = &f.trace {
        for (i, step) in trace.iter().enumerate() {
            if step.identifier.trim().is_empty() {
                report.push(format!("trace[{i}]: empty identifier"));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Finding {
        Finding {
            summary: "telnetd enabled with default password".into(),
            location: ObjectRef::file("etc/init.d/rcS").unwrap(),
            semantic_type: SemanticType::Misconfiguration,
            link_ids: BTreeSet::new(),
            evidence: vec![Evidence {
                agent_id: "0.1".into(),
                tool: "ShellExecute".into(),
                timestamp: epoch(),
                raw_snippet: "telnetd -l /bin/sh".into(),
                locator: None,
            }],
            confidence: Confidence::Verified,
            explanation: None,
            trace: None,
        }
    }

    #[test]
    fn verified_without_evidence_reported() {
        let mut f = base();
        f.evidence.clear();
        let r = validate_finding(&f);
        assert!(r.violations.iter().any(|v| v.contains("missing evidence")));
    }

    #[test]
    fn partial_with_explanation_is_clean() {
        let mut f = base();
        f.evidence.clear();
        f.confidence = Confidence::Partial;
        f.explanation = Some("no r2 output for callee".into());
        assert!(validate_finding(&f).is_empty());
    }

    #[test]
    fn partial_without_explanation_reported() {
        let mut f = base();
        f.confidence = Confidence::Partial;
        assert!(!validate_finding(&f).is_empty());
    }

    #[test]
    fn link_ids_normalize_to_hand_oracle() {
        let mut f = base();
        f.link_ids.insert("TELNETD".into());
        // raw ids are not normalized
        assert!(!validate_finding(&f).is_empty());
        let n = f.normalized();
        let oracle: BTreeSet<String> = ["telnetd".to_string()].into();
        assert_eq!(n.link_ids, oracle);
        assert!(validate_finding(&n).is_empty());
        assert_eq!(normalize_link_id("  Open  SSL\t1.0 "), "open ssl 1.0");
    }

    #[test]
    fn empty_snippet_reported() {
        let mut f = base();
        f.evidence[0].raw_snippet = "  ".into();
        assert!(!validate_finding(&f).is_empty());
    }

    #[test]
    fn serialized_field_names() {
        let v = serde_json::to_value(base()).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        let expected: BTreeSet<&str> = [
            "summary", "location", "semantic_type", "link_ids", "evidence", "confidence", "explanation", "trace",
        ]
        .into();
        assert_eq!(keys, expected);
        assert_eq!(v["evidence"][0]["timestamp"], "1970-01-01T00:00:00Z");
    }
}
