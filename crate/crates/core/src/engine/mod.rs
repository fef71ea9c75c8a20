//! Run orchestration: the agent registry, delegation, termination and run
//! metrics.
//!
//! All registry mutations go through one mutex so spawn, terminate and
//! metric updates are atomic with respect to each other. Agents themselves
//! run outside the lock.

mod artifacts;
mod delegate;
mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::envelope::DEFAULT_MAX_PARSE_RETRIES;
use crate::hub::KnowledgeHub;
use crate::llm::{AgentBinding, BackendHandle};
use crate::model::{
    AgentConfig, AgentId, AgentType, Budget, ChildResult, Message, ModelError, NodeState, ObjectRef, ResultStatus,
    Role, TaskSpec, ToANode, ToolId,
};
use crate::roles::{run_agent, RolePromptSet, TaintConfig, ToolRegistry};
use crate::tools::ToolSuite;

pub use artifacts::{canonicalize, write_run_artifacts, EVENTS_FILE, METRICS_FILE, TOA_FILE};
pub use delegate::{check_isolation, delegate, DelegationError, DelegationMode, DelegationRequest, IsolationViolation};
pub use metrics::RunMetrics;

pub const DEFAULT_RESULT_CAP: usize = 16 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    pub run_id: String,
    /// Run children one after another instead of on worker threads.
    pub single_threaded: bool,
    /// Byte cap for a child result appended to its parent's memory.
    pub result_cap: usize,
    pub max_parse_retries: u32,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            run_id: "run".into(),
            single_threaded: false,
            result_cap: DEFAULT_RESULT_CAP,
            max_parse_retries: DEFAULT_MAX_PARSE_RETRIES,
        }
    }
}

/// Everything a run needs besides the prompt, budget and backend.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub tools: ToolSuite,
    pub hub: KnowledgeHub,
    pub prompts: RolePromptSet,
    pub registry: ToolRegistry,
    pub taint: TaintConfig,
    pub options: RunOptions,
}

impl RunSetup {
    pub fn new(tools: ToolSuite, hub: KnowledgeHub) -> Self {
        RunSetup {
            tools,
            hub,
            prompts: RolePromptSet::default(),
            registry: ToolRegistry::default(),
            taint: TaintConfig::default(),
            options: RunOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Spawn,
    Step,
    Tool,
    DelegateStart,
    DelegateEnd,
    ChildResult,
    DepthExceeded,
    Pkh,
    Terminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub agent_id: AgentId,
    pub kind: EventKind,
    pub timestamp: DateTime<Utc>,
    pub detail: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Completed,
    BudgetExhausted,
    Failed,
}

impl TerminationReason {
    fn state(self) -> NodeState {
        match self {
            TerminationReason::Completed => NodeState::Completed,
            TerminationReason::BudgetExhausted => NodeState::BudgetExhausted,
            TerminationReason::Failed => NodeState::Failed,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("agent {0} is not registered")]
    UnknownAgent(AgentId),
    #[error("agent {0} is not running")]
    NotRunning(AgentId),
    #[error("agent {agent} still has running children: {children:?}")]
    ChildrenStillRunning { agent: AgentId, children: Vec<AgentId> },
    #[error("run is sealed")]
    Sealed,
    #[error("root agent failed: {explanation}")]
    RootFailure { explanation: String, run: Box<ToARun> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tool(#[from] crate::tools::ToolError),
}

#[derive(Debug, Default)]
pub(crate) struct Registry {
    pub nodes: BTreeMap<AgentId, ToANode>,
    pub events: Vec<Event>,
    pub tools_used: BTreeMap<AgentId, BTreeMap<ToolId, u32>>,
    pub files: BTreeSet<String>,
    pub alerts: Vec<u64>,
    pub depth_exceeded: u32,
    pub max_depth: u32,
    pub max_branch: u32,
    pub total_steps: u64,
    pub sealed: bool,
}

impl Registry {
    pub fn event(&mut self, agent: &AgentId, kind: EventKind, detail: Value) {
        let seq = self.events.len() as u64;
        self.events.push(Event {
            seq,
            agent_id: agent.clone(),
            kind,
            timestamp: Utc::now(),
            detail,
        });
    }
}

/// Shared state of one run. Agents hold `&RunContext` for the duration of
/// the run.
pub struct RunContext {
    pub setup: RunSetup,
    pub user_prompt: String,
    pub budget: Budget,
    template: BackendHandle,
    started: Instant,
    started_at: DateTime<Utc>,
    registry: Mutex<Registry>,
}

impl RunContext {
    pub fn new(setup: RunSetup, user_prompt: impl Into<String>, budget: Budget, handle: &BackendHandle) -> Self {
        RunContext {
            setup,
            user_prompt: user_prompt.into(),
            budget,
            template: handle.fresh_run(),
            started: Instant::now(),
            started_at: Utc::now(),
            registry: Mutex::new(Registry::default()),
        }
    }

    pub(crate) fn lock(&self) -> MutexGuard<'_, Registry> {
        self.registry.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn run_id(&self) -> &str {
        &self.setup.options.run_id
    }

    pub fn deadline_passed(&self) -> bool {
        self.budget
            .wall_clock_limit()
            .is_some_and(|limit| self.started.elapsed() >= limit)
    }

    pub fn node(&self, id: &AgentId) -> Option<ToANode> {
        self.lock().nodes.get(id).cloned()
    }

    pub fn record_event(&self, agent: &AgentId, kind: EventKind, detail: Value) {
        self.lock().event(agent, kind, detail);
    }

    /// Records a tool that produced a tool-role entry, plus any files it read.
    pub(crate) fn record_tool(&self, agent: &AgentId, tool: ToolId, files: &[String], detail: Value) {
        let mut reg = self.lock();
        *reg.tools_used.entry(agent.clone()).or_default().entry(tool).or_default() += 1;
        reg.files.extend(files.iter().cloned());
        reg.event(agent, EventKind::Tool, detail);
    }

    pub(crate) fn record_alert(&self, agent: &AgentId, record_id: u64, merged: bool) {
        let mut reg = self.lock();
        if !reg.alerts.contains(&record_id) {
            reg.alerts.push(record_id);
        }
        reg.event(agent, EventKind::Pkh, json!({"op": "store", "record_id": record_id, "merged": merged}));
    }

    pub(crate) fn record_step(&self, agent: &AgentId, step: u32, detail: Value) {
        let mut reg = self.lock();
        if let Some(n) = reg.nodes.get_mut(agent) {
            n.steps_used = step;
        }
        reg.total_steps += 1;
        reg.event(agent, EventKind::Step, detail);
    }

    /// Tools run by `agent` or any of its descendants.
    pub fn tools_used_in_subtree(&self, agent: &AgentId) -> BTreeSet<ToolId> {
        let reg = self.lock();
        reg.tools_used
            .iter()
            .filter(|(id, _)| *id == agent || agent.is_ancestor_of(id))
            .flat_map(|(_, m)| m.keys().copied())
            .collect()
    }

    /// Agent types from the root down to `agent`.
    pub fn lineage(&self, agent: &AgentId) -> Vec<AgentType> {
        let reg = self.lock();
        let segs = agent.segments();
        (1..=segs.len())
            .filter_map(|n| {
                let id: AgentId = segs[..n]
                    .iter()
                    .map(u32::to_string)
                    .collect::<Vec<_>>()
                    .join(".")
                    .parse()
                    .ok()?;
                reg.nodes.get(&id).map(|node| node.agent_type)
            })
            .collect()
    }

    /// Registers a new agent under `parent` (or as the root) and builds its
    /// configuration: fresh memory holding only the system prompt and task,
    /// a fresh client, and the role's tool set.
    pub(crate) fn spawn_locked(
        &self,
        reg: &mut Registry,
        parent: Option<&AgentId>,
        task: TaskSpec,
    ) -> Result<(AgentId, AgentConfig, BackendHandle), EngineError> {
        if reg.sealed {
            return Err(EngineError::Sealed);
        }
        let (id, depth) = match parent {
            None => (AgentId::root(), 0),
            Some(p) => {
                let pn = reg.nodes.get(p).ok_or_else(|| EngineError::UnknownAgent(p.clone()))?;
                (p.child(pn.children.len() as u32), pn.depth + 1)
            }
        };
        let agent_type = task.object.kind;
        let tools = self.setup.registry.tools_for(agent_type);
        let system = self.setup.prompts.system_prompt(agent_type, &tools, &self.setup.taint);
        let memory = vec![
            Message::new(Role::System, system),
            Message::new(Role::User, self.task_message(&task, parent.is_none())),
        ];
        let handle = self.template.spawn_isolated_client().bind(AgentBinding {
            agent_id: id.clone(),
            agent_type,
            object: task.object.clone(),
            goal: task.goal.clone(),
        });
        let config = AgentConfig {
            llm: handle.describe(),
            output_schema: crate::envelope::ENVELOPE_SCHEMA.to_string(),
            memory,
            task: task.clone(),
            agent_type,
            tool: tools,
        };
        if let Some(p) = parent {
            let pn = reg.nodes.get_mut(p).expect("parent checked above");
            pn.children.push(id.clone());
            let branch = pn.children.len() as u32;
            reg.max_branch = reg.max_branch.max(branch);
        }
        reg.max_depth = reg.max_depth.max(depth);
        reg.nodes.insert(
            id.clone(),
            ToANode {
                agent_id: id.clone(),
                parent_id: parent.cloned(),
                agent_type,
                task: task.clone(),
                depth,
                state: NodeState::Running,
                steps_used: 0,
                children: Vec::new(),
                result: None,
                tokens: Default::default(),
            },
        );
        reg.event(
            &id,
            EventKind::Spawn,
            json!({
                "parent": parent.map(|p| p.to_string()),
                "agent_type": agent_type,
                "object": task.object,
                "goal": task.goal,
                "depth": depth,
            }),
        );
        Ok((id, config, handle))
    }

    fn task_message(&self, task: &TaskSpec, is_root: bool) -> String {
        if is_root {
            format!(
                "User request: {}\nCurrent analysis focus: {}",
                self.user_prompt.trim(),
                task.object
            )
        } else {
            format!(
                "Overall user request: {}\nCurrent analysis focus: {}\nYour task: {}",
                self.user_prompt.trim(),
                task.object,
                task.goal
            )
        }
    }

    /// Moves `agent` into a terminal state. Terminating the root seals the
    /// run.
    pub fn terminate_agent(
        &self,
        agent: &AgentId,
        reason: TerminationReason,
        result: ChildResult,
        tokens: crate::model::TokenUsage,
    ) -> Result<ToANode, EngineError> {
        let mut reg = self.lock();
        let node = reg.nodes.get(agent).ok_or_else(|| EngineError::UnknownAgent(agent.clone()))?;
        if node.state.is_terminal() {
            return Err(EngineError::NotRunning(agent.clone()));
        }
        let running: Vec<AgentId> = node
            .children
            .iter()
            .filter(|c| reg.nodes.get(*c).is_some_and(|n| n.state == NodeState::Running))
            .cloned()
            .collect();
        if !running.is_empty() {
            return Err(EngineError::ChildrenStillRunning {
                agent: agent.clone(),
                children: running,
            });
        }
        let status = result.status;
        let node = reg.nodes.get_mut(agent).expect("checked above");
        node.transition(reason.state())?;
        node.result = Some(result);
        node.tokens = tokens;
        let out = node.clone();
        reg.event(
            agent,
            EventKind::Terminate,
            json!({"reason": reason, "status": status, "steps_used": out.steps_used}),
        );
        if out.parent_id.is_none() {
            reg.sealed = true;
        }
        Ok(out)
    }

    /// Snapshot of the run. Metrics are final once the root has terminated.
    pub fn snapshot(&self) -> ToARun {
        let reg = self.lock();
        let root = AgentId::root();
        let report = reg
            .nodes
            .get(&root)
            .and_then(|n| n.result.clone())
            .unwrap_or_else(|| ChildResult::failed(AgentType::Directory, "root has not terminated"));
        let usage = self.template.run_usage();
        let metrics = RunMetrics::from_registry(&reg, usage, self.started.elapsed());
        ToARun {
            run_id: self.run_id().to_string(),
            root_id: root,
            started_at: self.started_at,
            budget: self.budget,
            nodes: reg.nodes.clone(),
            metrics,
            events: reg.events.clone(),
            report,
            alerts: reg.alerts.clone(),
            tool_tallies: reg.tools_used.clone(),
            files_accessed: reg.files.clone(),
            sealed: reg.sealed,
        }
    }
}

/// A finished (or in-progress) tree of agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToARun {
    pub run_id: String,
    pub root_id: AgentId,
    pub started_at: DateTime<Utc>,
    pub budget: Budget,
    pub nodes: BTreeMap<AgentId, ToANode>,
    pub metrics: RunMetrics,
    pub events: Vec<Event>,
    pub report: ChildResult,
    /// Knowledge hub record ids stored during this run, first-store order.
    pub alerts: Vec<u64>,
    pub tool_tallies: BTreeMap<AgentId, BTreeMap<ToolId, u32>>,
    pub files_accessed: BTreeSet<String>,
    pub sealed: bool,
}

impl ToARun {
    /// Checks that parent links form one rooted tree consistent with the
    /// children lists.
    pub fn check_tree(&self) -> Result<(), String> {
        if !self.nodes.contains_key(&self.root_id) {
            return Err("missing root".into());
        }
        for (id, n) in &self.nodes {
            match (&n.parent_id, id.parent()) {
                (None, None) => {}
                (Some(p), Some(q)) if *p == q => {
                    let parent = self.nodes.get(p).ok_or_else(|| format!("{id}: parent {p} missing"))?;
                    if !parent.children.contains(id) {
                        return Err(format!("{id}: not listed among {p}'s children"));
                    }
                }
                _ => return Err(format!("{id}: parent link inconsistent with id")),
            }
            if n.depth as usize != id.depth() {
                return Err(format!("{id}: depth {} disagrees with id", n.depth));
            }
            for c in &n.children {
                if c.parent().as_ref() != Some(id) || !self.nodes.contains_key(c) {
                    return Err(format!("{id}: bad child {c}"));
                }
            }
        }
        Ok(())
    }

    /// Every (parent, child) edge whose types break the growth blueprint.
    pub fn blueprint_violations(&self) -> Vec<(AgentId, AgentId)> {
        let mut out = Vec::new();
        for (id, n) in &self.nodes {
            let Some(p) = &n.parent_id else { continue };
            let mut lineage = Vec::new();
            let mut cur = Some(p.clone());
            while let Some(c) = cur {
                let Some(node) = self.nodes.get(&c) else { break };
                lineage.push(node.agent_type);
                cur = node.parent_id.clone();
            }
            lineage.reverse();
            if crate::roles::enforce_growth_blueprint(&lineage, &n.task).is_err() {
                out.push((p.clone(), id.clone()));
            }
        }
        out
    }

    pub fn node_at(&self, object: &ObjectRef) -> Option<&ToANode> {
        self.nodes.values().find(|n| n.task.object == *object)
    }

    pub fn failed(&self) -> bool {
        self.report.status == ResultStatus::Failed
    }
}

/// Builds the root directory agent over the firmware root, drives it to
/// termination and returns the sealed run.
pub fn run_root(setup: RunSetup, user_prompt: &str, budget: Budget, handle: &BackendHandle) -> Result<ToARun, EngineError> {
    let ctx = RunContext::new(setup, user_prompt, budget, handle);
    let task = TaskSpec::new(ObjectRef::directory("")?, user_prompt, "user")?;
    let (id, config, agent_handle) = {
        let mut reg = ctx.lock();
        ctx.spawn_locked(&mut reg, None, task)?
    };
    let result = run_agent(&ctx, &id, config, agent_handle);
    let run = ctx.snapshot();
    if result.status == ResultStatus::Failed {
        return Err(EngineError::RootFailure {
            explanation: result.explanation.unwrap_or_default(),
            run: Box::new(run),
        });
    }
    Ok(run)
}
