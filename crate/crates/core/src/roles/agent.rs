use std::collections::BTreeSet;

use chrono::Utc;
use serde::Deserialize;
use serde_json::{json, Value};

use super::report::{merge_findings, provenance_violation, stamp_evidence, FinalizeCtx};
use super::finalize_report;
use crate::engine::{delegate, DelegationError, DelegationMode, DelegationRequest, RunContext, TerminationReason};
use crate::envelope::{repair_loop, ActionEnvelope, EnvelopeAction, EnvelopeContract, EnvelopeStatus, RepairError};
use crate::hub::QuerySpec;
use crate::llm::BackendHandle;
use crate::model::{
    join_relative, normalize_object_ref, normalize_relative, path_is_within, AgentConfig, AgentId, AgentType,
    ChildResult, Confidence, Finding, FunctionLocator, FunctionReport, Message, ObjectKind, ObjectRef, ReportPayload,
    Role, SemanticType, TaskSpec, ToolId,
};
use crate::tools::{cap_output, ToolError, ToolInvocation};

/// One agent's private working state.
pub struct AgentState {
    pub id: AgentId,
    pub agent_type: AgentType,
    pub task: TaskSpec,
    /// Findings carried up by file and directory children.
    pub child_findings: Vec<Finding>,
}

impl AgentState {
    /// Directory the agent may look into: its own directory, or the one
    /// holding its file or binary.
    pub fn scope(&self) -> &str {
        self.task.object.containing_dir()
    }
}

/// Memory entries produced by one dispatched action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchOutcome {
    pub entries: Vec<Message>,
}

impl DispatchOutcome {
    fn tool(text: impl Into<String>) -> Self {
        DispatchOutcome {
            entries: vec![Message::new(Role::Tool, text)],
        }
    }

    fn error(tool: ToolId, text: impl std::fmt::Display) -> Self {
        DispatchOutcome {
            entries: vec![Message::new(Role::Error, format!("{tool} failed: {text}"))],
        }
    }
}

/// Drives one agent through its observe, reason, act loop until it
/// finishes, runs out of budget or fails, then terminates its node.
pub fn run_agent(ctx: &RunContext, id: &AgentId, config: AgentConfig, handle: BackendHandle) -> ChildResult {
    let mut memory = config.memory;
    let mut agent = AgentState {
        id: id.clone(),
        agent_type: config.agent_type,
        task: config.task,
        child_findings: Vec::new(),
    };
    let contract = EnvelopeContract::new(config.tool, Some(agent.agent_type));
    let max_steps = ctx.budget.max_steps_per_agent();
    let mut steps = 0u32;
    let (reason, result) = loop {
        if steps >= max_steps {
            let why = format!("step budget exhausted after {steps} steps");
            break (TerminationReason::BudgetExhausted, ChildResult::partial(partial_payload(&agent, &why), why));
        }
        if ctx.deadline_passed() {
            let why = "run wall-clock limit reached".to_string();
            break (TerminationReason::BudgetExhausted, ChildResult::partial(partial_payload(&agent, &why), why));
        }
        let env = match repair_loop(&handle, &mut memory, &ctx.budget, ctx.setup.options.max_parse_retries, &contract) {
            Ok((env, _)) => env,
            Err(RepairError::EnvelopeFailure { attempts }) => {
                let why = format!("no valid action envelope after {} attempts", attempts.len());
                break (TerminationReason::Failed, ChildResult::failed(agent.agent_type, why));
            }
            Err(RepairError::Service(e)) => {
                break (TerminationReason::Failed, ChildResult::failed(agent.agent_type, e.to_string()));
            }
        };
        steps += 1;
        ctx.record_step(
            id,
            steps,
            json!({"step": steps, "action": env.action.to_string(), "status": env.status}),
        );
        match env.action {
            EnvelopeAction::Finish if env.status == EnvelopeStatus::Failure => {
                let why = failure_text(&env.action_input);
                break (TerminationReason::Failed, ChildResult::failed(agent.agent_type, why));
            }
            EnvelopeAction::Finish => {
                let tools_used = ctx.tools_used_in_subtree(id);
                let fctx = FinalizeCtx {
                    agent_id: id.to_string(),
                    tools_used: &tools_used,
                    child_findings: agent.child_findings.clone(),
                    taint: &ctx.setup.taint,
                    now: Utc::now(),
                };
                match finalize_report(agent.agent_type, &env.action_input, &fctx) {
                    Ok(payload) => break (TerminationReason::Completed, ChildResult::success(payload)),
                    Err(problems) => memory.push(Message::new(
                        Role::Error,
                        format!("final report rejected, fix and finish again: {}", problems.join("; ")),
                    )),
                }
            }
            EnvelopeAction::Tool(_) => {
                let out = dispatch_action(ctx, &mut agent, &env);
                memory.extend(out.entries);
            }
        }
    };
    let tokens = handle.agent_usage();
    if let Err(e) = ctx.terminate_agent(id, reason, result.clone(), tokens) {
        log::error!("terminating {id}: {e}");
    }
    result
}

fn failure_text(input: &Value) -> String {
    match input {
        Value::String(s) if !s.trim().is_empty() => s.clone(),
        Value::Object(m) => ["explanation", "summary", "reason"]
            .iter()
            .find_map(|k| m.get(*k).and_then(Value::as_str).map(str::to_string))
            .unwrap_or_else(|| input.to_string()),
        _ => "agent reported failure".into(),
    }
}

fn partial_payload(agent: &AgentState, why: &str) -> ReportPayload {
    match ReportPayload::empty(agent.agent_type) {
        ReportPayload::Function(_) => ReportPayload::Function(FunctionReport {
            summary: "analysis incomplete".into(),
            stop_point: Some(why.to_string()),
            ..Default::default()
        }),
        ReportPayload::Directory(mut d) => {
            d.findings = merge_findings(vec![], agent.child_findings.clone());
            ReportPayload::Directory(d)
        }
        ReportPayload::File(mut f) => {
            f.findings = merge_findings(vec![], agent.child_findings.clone());
            ReportPayload::File(f)
        }
    }
}

/// Executes the tool named by `env` and returns the memory entries to
/// append: tool entries on success, an error entry otherwise.
pub fn dispatch_action(ctx: &RunContext, agent: &mut AgentState, env: &ActionEnvelope) -> DispatchOutcome {
    let EnvelopeAction::Tool(tool) = env.action else {
        return DispatchOutcome {
            entries: vec![Message::new(Role::Error, "finish is not a tool")],
        };
    };
    if !ctx.setup.registry.permits(agent.agent_type, tool) {
        return DispatchOutcome::error(
            tool,
            format!("ForbiddenTool: {} agents may not use {tool}", agent.agent_type),
        );
    }
    let input = &env.action_input;
    match tool {
        ToolId::GetContext => invoke(ctx, agent, tool, || {
            let path = str_arg(input, &["path", "target"]).unwrap_or_else(|| agent.task.object.path.clone());
            let scope = resolve_object(ctx, agent, &path)?;
            ctx.setup.tools.get_context(&scope)
        }),
        ToolId::ShellExecute => invoke(ctx, agent, tool, || {
            let cmd = str_arg(input, &["command", "cmd"])
                .ok_or_else(|| ToolError::InvalidInput("expected {\"command\": \"...\"}".into()))?;
            let scope = ObjectRef::directory(agent.scope())?;
            ctx.setup.tools.shell_execute(&cmd, &scope)
        }),
        ToolId::BinaryAnalysis => invoke(ctx, agent, tool, || {
            let cmd = str_arg(input, &["command", "cmd"])
                .ok_or_else(|| ToolError::InvalidInput("expected {\"command\": \"...\"}".into()))?;
            let target = match input.get("target").and_then(Value::as_str) {
                Some(t) => resolve_path(agent, t)?,
                None if agent.agent_type != AgentType::Directory => agent.task.object.path.clone(),
                None => return Err(ToolError::InvalidInput("a target binary is required".into())),
            };
            ctx.setup.tools.binary_query(&ObjectRef::file(target)?, &cmd)
        }),
        ToolId::Delegation | ToolId::ParallelDelegation => dispatch_delegation(ctx, agent, tool, input),
        ToolId::Store => dispatch_store(ctx, agent, input),
        ToolId::Query => {
            let spec: QuerySpec = match serde_json::from_value(input.clone()) {
                Ok(q) => q,
                Err(e) => return DispatchOutcome::error(tool, format!("invalid query: {e}")),
            };
            match ctx.setup.hub.query(&spec) {
                Ok(recs) => hub_result(ctx, agent, tool, &recs),
                Err(e) => DispatchOutcome::error(tool, e),
            }
        }
        ToolId::Explore => {
            let draft = match explore_draft(agent, input) {
                Ok(d) => d,
                Err(e) => return DispatchOutcome::error(tool, e),
            };
            match ctx.setup.hub.explore(&draft) {
                Ok(recs) => hub_result(ctx, agent, tool, &recs),
                Err(e) => DispatchOutcome::error(tool, e),
            }
        }
    }
}

fn invoke(
    ctx: &RunContext,
    agent: &AgentState,
    tool: ToolId,
    f: impl FnOnce() -> Result<ToolInvocation, ToolError>,
) -> DispatchOutcome {
    match f() {
        Ok(inv) => {
            ctx.record_tool(
                &agent.id,
                tool,
                &inv.files,
                json!({"tool": tool, "ok": inv.ok, "truncated": inv.truncated, "exit_status": inv.exit_status, "parameters": inv.parameters}),
            );
            let mut text = inv.output;
            if let Some(code) = inv.exit_status.filter(|c| *c != 0) {
                text.push_str(&format!("\n[exit status {code}]"));
            }
            DispatchOutcome::tool(text)
        }
        Err(ToolError::Timeout(inv)) => {
            ctx.record_event(
                &agent.id,
                crate::engine::EventKind::Tool,
                json!({"tool": tool, "ok": false, "timeout": true, "parameters": inv.parameters}),
            );
            DispatchOutcome::error(tool, format!("timed out; partial output:\n{}", inv.output))
        }
        Err(e) => {
            ctx.record_event(
                &agent.id,
                crate::engine::EventKind::Tool,
                json!({"tool": tool, "ok": false, "error": e.to_string()}),
            );
            DispatchOutcome::error(tool, e)
        }
    }
}

fn str_arg(input: &Value, keys: &[&str]) -> Option<String> {
    match input {
        Value::String(s) => Some(s.clone()),
        Value::Object(m) => keys.iter().find_map(|k| m.get(*k).and_then(Value::as_str).map(str::to_string)),
        _ => None,
    }
}

/// Interprets `raw` as a root-relative path, falling back to a path relative
/// to the agent's scope. The result must stay inside the scope.
fn resolve_path(agent: &AgentState, raw: &str) -> Result<String, ToolError> {
    let scope = agent.scope();
    let trimmed = raw.trim().trim_start_matches('/');
    if let Ok(p) = normalize_relative(trimmed) {
        if path_is_within(&p, scope) {
            return Ok(p);
        }
    }
    let joined = join_relative(scope, trimmed)?;
    if path_is_within(&joined, scope) {
        Ok(joined)
    } else {
        Err(ToolError::InvalidInput(format!(
            "{raw:?} lies outside the current analysis focus /{scope}"
        )))
    }
}

fn resolve_object(ctx: &RunContext, agent: &AgentState, raw: &str) -> Result<ObjectRef, ToolError> {
    let p = resolve_path(agent, raw)?;
    Ok(normalize_object_ref(&p, ctx.setup.tools.root())?)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubtaskInput {
    #[serde(default)]
    kind: Option<ObjectKind>,
    #[serde(default, alias = "target", alias = "object")]
    path: Option<String>,
    #[serde(default)]
    function: Option<String>,
    #[serde(default)]
    address: Option<u64>,
    #[serde(alias = "task")]
    goal: String,
}

fn build_subtask(ctx: &RunContext, agent: &AgentState, s: SubtaskInput) -> Result<TaskSpec, String> {
    let is_function = s.kind == Some(ObjectKind::Function) || s.function.is_some() || s.address.is_some();
    let object = if is_function {
        let binary = match &s.path {
            Some(p) => resolve_path(agent, p).map_err(|e| e.to_string())?,
            None if agent.agent_type != AgentType::Directory => agent.task.object.path.clone(),
            None => return Err("function subtasks need the binary path".into()),
        };
        let on_disk = normalize_object_ref(&binary, ctx.setup.tools.root()).map_err(|e| e.to_string())?;
        if on_disk.kind != ObjectKind::File {
            return Err(format!("{binary} is not a file"));
        }
        ObjectRef::function(
            &binary,
            FunctionLocator {
                name: s.function.clone(),
                address: s.address,
            },
        )
        .map_err(|e| e.to_string())?
    } else {
        let p = s.path.as_deref().ok_or("subtask needs a path")?;
        let o = resolve_object(ctx, agent, p).map_err(|e| e.to_string())?;
        if let Some(k) = s.kind.filter(|k| *k != o.kind) {
            return Err(format!("{} is a {}, not a {k}", o.path, o.kind));
        }
        o
    };
    TaskSpec::new(object, s.goal, agent.id.to_string()).map_err(|e| e.to_string())
}

fn dispatch_delegation(ctx: &RunContext, agent: &mut AgentState, tool: ToolId, input: &Value) -> DispatchOutcome {
    let raw: Vec<Value> = match (tool, input) {
        (_, Value::Object(m)) if m.contains_key("subtasks") => match m.get("subtasks") {
            Some(Value::Array(v)) => v.clone(),
            _ => return DispatchOutcome::error(tool, "\"subtasks\" must be an array"),
        },
        (_, Value::Array(v)) => v.clone(),
        (ToolId::Delegation, v @ Value::Object(_)) => vec![v.clone()],
        _ => return DispatchOutcome::error(tool, "expected {\"subtasks\": [...]}"),
    };
    let mut subtasks = Vec::with_capacity(raw.len());
    for (i, v) in raw.into_iter().enumerate() {
        let parsed: SubtaskInput = match serde_json::from_value(v) {
            Ok(s) => s,
            Err(e) => return DispatchOutcome::error(tool, format!("subtask {i}: {e}")),
        };
        match build_subtask(ctx, agent, parsed) {
            Ok(t) => subtasks.push(t),
            Err(e) => return DispatchOutcome::error(tool, format!("subtask {i}: {e}")),
        }
    }
    let mode = if tool == ToolId::Delegation {
        DelegationMode::Single
    } else {
        DelegationMode::Parallel
    };
    let req = DelegationRequest {
        subtasks,
        mode,
        requester: agent.id.clone(),
    };
    match delegate(ctx, req) {
        Ok(results) => {
            let cap = ctx.setup.options.result_cap;
            let entries = results
                .into_iter()
                .map(|(child, r)| {
                    if matches!(r.payload, ReportPayload::Directory(_) | ReportPayload::File(_)) {
                        agent.child_findings.extend(r.payload.findings().iter().cloned());
                    }
                    let text = json!({
                        "child": child.to_string(),
                        "status": r.status,
                        "explanation": r.explanation,
                        "report": r.payload,
                    })
                    .to_string();
                    Message::new(Role::Tool, cap_output(&text, cap).0)
                })
                .collect();
            DispatchOutcome { entries }
        }
        Err(e @ DelegationError::DepthExceeded { .. }) => {
            DispatchOutcome::error(tool, format!("{e}; analyze this part yourself and record where you stopped"))
        }
        Err(e) => DispatchOutcome::error(tool, e),
    }
}

fn dispatch_store(ctx: &RunContext, agent: &AgentState, input: &Value) -> DispatchOutcome {
    let tool = ToolId::Store;
    let value = input.get("finding").cloned().unwrap_or_else(|| input.clone());
    let finding: Finding = match serde_json::from_value(value) {
        Ok(f) => f,
        Err(e) => return DispatchOutcome::error(tool, format!("invalid finding: {e}")),
    };
    let finding = stamp_evidence(finding, &agent.id.to_string(), Utc::now());
    let used = ctx.tools_used_in_subtree(&agent.id);
    if let Some(v) = provenance_violation(&finding, &used) {
        return DispatchOutcome::error(tool, v);
    }
    match ctx
        .setup
        .hub
        .proactive_commit(&finding, &agent.id, agent.agent_type, ctx.run_id())
    {
        Ok(out) => {
            ctx.record_alert(&agent.id, out.record_id, out.merged);
            ctx.record_tool(&agent.id, tool, &[], json!({"tool": tool, "ok": true}));
            let refs = ctx
                .setup
                .hub
                .get(out.record_id)
                .ok()
                .flatten()
                .map(|r| r.enrichment_refs)
                .unwrap_or_default();
            let verb = if out.merged { "merged into existing" } else { "stored as" };
            DispatchOutcome::tool(format!(
                "{verb} record {} (correlated with records {:?})",
                out.record_id, refs
            ))
        }
        Err(e) => DispatchOutcome::error(tool, e),
    }
}

fn hub_result(ctx: &RunContext, agent: &AgentState, tool: ToolId, recs: &[crate::hub::HubRecord]) -> DispatchOutcome {
    ctx.record_tool(&agent.id, tool, &[], json!({"tool": tool, "ok": true, "hits": recs.len()}));
    let text = serde_json::to_string(recs).unwrap_or_else(|_| "[]".into());
    DispatchOutcome::tool(cap_output(&text, ctx.setup.tools.output_cap).0)
}

#[derive(Debug, Deserialize)]
struct ExploreInput {
    #[serde(default)]
    path: Option<String>,
    #[serde(default)]
    location: Option<ObjectRef>,
    #[serde(default)]
    link_ids: BTreeSet<String>,
    #[serde(default)]
    summary: Option<String>,
}

fn explore_draft(agent: &AgentState, input: &Value) -> Result<Finding, String> {
    let e: ExploreInput = serde_json::from_value(input.clone()).map_err(|e| format!("invalid draft: {e}"))?;
    let location = match (e.location, e.path) {
        (Some(l), _) => l,
        (None, Some(p)) => ObjectRef::file(p.trim_start_matches('/')).map_err(|e| e.to_string())?,
        (None, None) => agent.task.object.clone(),
    };
    Ok(Finding {
        summary: e.summary.unwrap_or_default(),
        location,
        semantic_type: SemanticType::Other,
        link_ids: e.link_ids,
        evidence: vec![],
        confidence: Confidence::Partial,
        explanation: None,
        trace: None,
    })
}
