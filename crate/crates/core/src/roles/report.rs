use std::collections::{BTreeSet, HashSet};

use chrono::{DateTime, Utc};
use serde_json::Value;

use super::{bare_symbol, TaintConfig};
use crate::envelope::strip_role_tag;
use crate::hub::dedup_key;
use crate::model::{
    epoch, validate_finding, AgentType, Confidence, Finding, ReportPayload, ToolId, TraceKind, TraceStep,
};

/// Vulnerability class implied by a sink.
pub fn classify_sink(identifier: &str) -> Option<&'static str> {
    match bare_symbol(identifier) {
        "system" | "popen" | "execl" | "execlp" | "execle" | "execv" | "execvp" | "execve" => {
            Some("CWE-78 OS command injection")
        }
        "strcpy" | "sprintf" | "strcat" | "memcpy" | "gets" => Some("CWE-120 buffer overflow"),
        _ => None,
    }
}

/// Problems with a function-level trace: empty identifiers, sink steps that
/// name no configured sink, and call sites visited twice.
pub fn check_trace(trace: &[TraceStep], taint: &TaintConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut calls = HashSet::new();
    for (i, step) in trace.iter().enumerate() {
        if step.identifier.trim().is_empty() {
            out.push(format!("trace[{i}]: empty identifier"));
            continue;
        }
        match step.trace_kind {
            TraceKind::Sink if !taint.is_sink(&step.identifier) => {
                out.push(format!("trace[{i}]: {:?} is not a configured sink", step.identifier));
            }
            TraceKind::Call | TraceKind::Sink => {
                let key = (bare_symbol(&step.identifier).to_string(), step.address);
                if !calls.insert(key) {
                    out.push(format!("trace[{i}]: call site {:?} revisited", step.identifier));
                }
            }
            _ => {}
        }
    }
    out
}

/// What [`finalize_report`] needs to know about the finishing agent.
pub struct FinalizeCtx<'a> {
    pub agent_id: String,
    /// Tools run by the agent or any of its descendants.
    pub tools_used: &'a BTreeSet<ToolId>,
    /// Findings carried up by the agent's children, in child order.
    pub child_findings: Vec<Finding>,
    pub taint: &'a TaintConfig,
    pub now: DateTime<Utc>,
}

/// Parses and checks a `finish` payload. File and directory reports absorb
/// the children's findings; function reports get a classification when the
/// trace ends at a known sink. Violations are returned for the agent to fix.
pub fn finalize_report(agent_type: AgentType, input: &Value, ctx: &FinalizeCtx<'_>) -> Result<ReportPayload, Vec<String>> {
    let mut payload =
        ReportPayload::parse_for(agent_type, &strip_role_tag(input)).map_err(|e| vec![format!("report format: {e}")])?;
    let mut problems = Vec::new();
    match &mut payload {
        ReportPayload::Directory(r) => {
            r.findings = own_findings(std::mem::take(&mut r.findings), ctx, &mut problems);
            r.findings = merge_findings(std::mem::take(&mut r.findings), ctx.child_findings.clone());
        }
        ReportPayload::File(r) => {
            r.findings = own_findings(std::mem::take(&mut r.findings), ctx, &mut problems);
            r.findings = merge_findings(std::mem::take(&mut r.findings), ctx.child_findings.clone());
        }
        ReportPayload::Function(r) => {
            problems.extend(check_trace(&r.trace, ctx.taint));
            if r.classification.is_none() {
                if let Some(last) = r.trace.last().filter(|s| s.trace_kind == TraceKind::Sink) {
                    r.classification = classify_sink(&last.identifier).map(str::to_string);
                }
            }
        }
    }
    if problems.is_empty() {
        Ok(payload)
    } else {
        Err(problems)
    }
}

/// Fills evidence provenance, then applies the evidence-first rule.
pub(crate) fn own_findings(findings: Vec<Finding>, ctx: &FinalizeCtx<'_>, problems: &mut Vec<String>) -> Vec<Finding> {
    findings
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            let f = stamp_evidence(f, &ctx.agent_id, ctx.now).normalized();
            for v in validate_finding(&f).violations {
                problems.push(format!("findings[{i}]: {v}"));
            }
            if let Some(v) = provenance_violation(&f, ctx.tools_used) {
                problems.push(format!("findings[{i}]: {v}"));
            }
            f
        })
        .collect()
}

pub(crate) fn stamp_evidence(mut f: Finding, agent_id: &str, now: DateTime<Utc>) -> Finding {
    for ev in &mut f.evidence {
        if ev.agent_id.trim().is_empty() {
            ev.agent_id = agent_id.to_string();
        }
        if ev.timestamp == epoch() {
            ev.timestamp = now;
        }
    }
    f
}

/// A verified finding must cite a tool that actually ran in the agent's
/// subtree.
pub(crate) fn provenance_violation(f: &Finding, tools_used: &BTreeSet<ToolId>) -> Option<String> {
    if f.confidence != Confidence::Verified {
        return None;
    }
    let grounded = f
        .evidence
        .iter()
        .any(|e| e.tool.parse::<ToolId>().is_ok_and(|t| tools_used.contains(&t)));
    (!grounded).then(|| {
        let cited: Vec<&str> = f.evidence.iter().map(|e| e.tool.as_str()).collect();
        format!("verified finding cites no tool output from this subtree (cited: {})", cited.join(", "))
    })
}

/// Own findings first, then children's, dropping duplicates by hub key.
pub(crate) fn merge_findings(own: Vec<Finding>, children: Vec<Finding>) -> Vec<Finding> {
    let mut seen = HashSet::new();
    own.into_iter()
        .chain(children)
        .filter(|f| seen.insert(dedup_key(f)))
        .collect()
}
