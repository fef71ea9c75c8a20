//! Deterministic rule-based backend standing in for an LLM.

use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AgentBinding, BackendError, BackendKind, Completion, CompletionBackend, CompletionRequest};
use crate::model::{AgentType, Message, ReportPayload, Role};

/// What a policy returns for one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptReply {
    Text(String),
    /// Simulates a transient service error.
    Fail(String),
}

pub trait ScriptPolicy: Send + Sync {
    fn respond(&self, binding: Option<&AgentBinding>, memory: &[Message]) -> ScriptReply;
}

impl<F> ScriptPolicy for F
where
    F: Fn(Option<&AgentBinding>, &[Message]) -> ScriptReply + Send + Sync,
{
    fn respond(&self, binding: Option<&AgentBinding>, memory: &[Message]) -> ScriptReply {
        self(binding, memory)
    }
}

/// Canned completion: either raw text (sent as-is) or a JSON value
/// (serialized compactly).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptResponse {
    Text(String),
    Json(serde_json::Value),
}

impl ScriptResponse {
    pub fn render(&self) -> String {
        match self {
            ScriptResponse::Text(t) => t.clone(),
            ScriptResponse::Json(v) => v.to_string(),
        }
    }
}

/// One ordered rule. Every present matcher must hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptRule {
    pub agent_type: Option<AgentType>,
    /// Exact normalized object path ("" is the firmware root).
    pub object: Option<String>,
    pub object_prefix: Option<String>,
    /// Function label for function agents.
    pub function: Option<String>,
    pub goal_contains: Option<String>,
    /// Number of assistant entries already in memory.
    pub turn: Option<usize>,
    pub last_tool_contains: Option<String>,
    pub last_role: Option<Role>,
    pub response: Option<ScriptResponse>,
    pub fail: Option<String>,
}

impl ScriptRule {
    fn matches(&self, binding: Option<&AgentBinding>, memory: &[Message]) -> bool {
        let needs_binding = self.agent_type.is_some()
            || self.object.is_some()
            || self.object_prefix.is_some()
            || self.function.is_some()
            || self.goal_contains.is_some();
        if needs_binding {
            let Some(b) = binding else { return false };
            if self.agent_type.is_some_and(|t| t != b.agent_type) {
                return false;
            }
            if self.object.as_ref().is_some_and(|o| *o != b.object.path) {
                return false;
            }
            if self.object_prefix.as_ref().is_some_and(|p| !b.object.path.starts_with(p.as_str())) {
                return false;
            }
            if let Some(f) = &self.function {
                match &b.object.function {
                    Some(loc) if loc.label() == *f => {}
                    _ => return false,
                }
            }
            if self.goal_contains.as_ref().is_some_and(|g| !b.goal.contains(g.as_str())) {
                return false;
            }
        }
        if let Some(t) = self.turn {
            if memory.iter().filter(|m| m.role == Role::Assistant).count() != t {
                return false;
            }
        }
        if let Some(needle) = &self.last_tool_contains {
            match memory.iter().rev().find(|m| m.role == Role::Tool) {
                Some(m) if m.content.contains(needle.as_str()) => {}
                _ => return false,
            }
        }
        if let Some(role) = self.last_role {
            if memory.last().map(|m| m.role) != Some(role) {
                return false;
            }
        }
        true
    }
}

/// Ordered rule list; first match wins.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedPolicy {
    pub rules: Vec<ScriptRule>,
    /// Completion for unmatched states. When absent, a role-appropriate empty
    /// `finish` envelope is used.
    pub default: Option<ScriptResponse>,
}

impl ScriptedPolicy {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        ScriptedPolicy { rules, default: None }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

impl ScriptPolicy for ScriptedPolicy {
    fn respond(&self, binding: Option<&AgentBinding>, memory: &[Message]) -> ScriptReply {
        for rule in &self.rules {
            if rule.matches(binding, memory) {
                if let Some(why) = &rule.fail {
                    return ScriptReply::Fail(why.clone());
                }
                if let Some(resp) = &rule.response {
                    return ScriptReply::Text(resp.render());
                }
            }
        }
        match &self.default {
            Some(d) => ScriptReply::Text(d.render()),
            None => ScriptReply::Text(default_finish(binding.map(|b| b.agent_type))),
        }
    }
}

/// An empty, schema-valid `finish` envelope for the given role.
pub fn default_finish(agent_type: Option<AgentType>) -> String {
    let payload = ReportPayload::empty(agent_type.unwrap_or(AgentType::Directory));
    let mut input = serde_json::to_value(&payload).expect("report serializes");
    if let Some(obj) = input.as_object_mut() {
        obj.remove("role");
        if agent_type == Some(AgentType::Function) {
            obj.insert("summary".into(), json!("no taint propagation observed"));
        }
    }
    json!({
        "thought": "nothing further to analyze",
        "action": "finish",
        "action_input": input,
        "status": "success",
    })
    .to_string()
}

pub struct ScriptedBackend {
    policy: Arc<dyn ScriptPolicy>,
}

impl ScriptedBackend {
    pub fn new(policy: impl ScriptPolicy + 'static) -> Self {
        ScriptedBackend {
            policy: Arc::new(policy),
        }
    }

    pub fn from_arc(policy: Arc<dyn ScriptPolicy>) -> Self {
        ScriptedBackend { policy }
    }
}

impl CompletionBackend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn complete_once(&self, req: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
        match self.policy.respond(req.binding, req.memory) {
            ScriptReply::Text(t) => Ok(Completion::text(t)),
            ScriptReply::Fail(e) => Err(BackendError::Transient(e)),
        }
    }

    fn backoff(&self, _retry: u32) -> Duration {
        Duration::ZERO
    }

    fn describe(&self) -> String {
        "scripted".into()
    }
}

/// Wraps a backend and fails its first `failures` attempts with a transient
/// error, counting every attempt.
pub struct FaultInjector<B> {
    inner: B,
    failures: u32,
    attempts: AtomicU32,
}

impl<B: CompletionBackend> FaultInjector<B> {
    pub fn new(inner: B, failures: u32) -> Self {
        FaultInjector {
            inner,
            failures,
            attempts: AtomicU32::new(0),
        }
    }

    pub fn attempts(&self) -> u32 {
        self.attempts.load(Ordering::SeqCst)
    }
}

impl<B: CompletionBackend> CompletionBackend for FaultInjector<B> {
    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn complete_once(&self, req: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
        let n = self.attempts.fetch_add(1, Ordering::SeqCst) + 1;
        if n <= self.failures {
            return Err(BackendError::Transient(format!("injected failure {n}/{}", self.failures)));
        }
        self.inner.complete_once(req)
    }

    fn backoff(&self, retry: u32) -> Duration {
        self.inner.backoff(retry)
    }

    fn describe(&self) -> String {
        format!("fault-injected({})", self.inner.describe())
    }
}
