use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::{EngineError, EventKind, RunContext};
use crate::llm::BackendHandle;
use crate::model::{AgentConfig, AgentId, ChildResult, NodeState, TaskSpec};
use crate::roles::{enforce_growth_blueprint, run_agent, BlueprintViolation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelegationMode {
    Single,
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelegationRequest {
    pub subtasks: Vec<TaskSpec>,
    pub mode: DelegationMode,
    pub requester: AgentId,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("a sibling already holds task {goal:?} on {object}")]
pub struct IsolationViolation {
    pub object: String,
    pub goal: String,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum DelegationError {
    #[error("delegation depth exceeded: a child of {requester} would sit at depth {depth}, the limit is {max_depth}")]
    DepthExceeded { requester: AgentId, depth: u32, max_depth: u32 },
    #[error(transparent)]
    Isolation(#[from] IsolationViolation),
    #[error(transparent)]
    Blueprint(#[from] BlueprintViolation),
    #[error("invalid delegation request: {0}")]
    InvalidRequest(String),
    #[error("agent {0} cannot delegate: {1}")]
    Unavailable(AgentId, String),
}

/// Fails when a sibling holds the same normalized object and goal.
pub fn check_isolation(new: &TaskSpec, siblings: &[TaskSpec]) -> Result<(), IsolationViolation> {
    let key = new.isolation_key();
    if siblings.iter().any(|s| s.isolation_key() == key) {
        return Err(IsolationViolation {
            object: new.object.key(),
            goal: new.goal.clone(),
        });
    }
    Ok(())
}

/// Spawns one child per subtask, runs them (in parallel for
/// [`DelegationMode::Parallel`]) and blocks until all have returned.
/// Results come back in subtask order.
pub fn delegate(ctx: &RunContext, req: DelegationRequest) -> Result<Vec<(AgentId, ChildResult)>, DelegationError> {
    if req.subtasks.is_empty() {
        return Err(DelegationError::InvalidRequest("no subtasks".into()));
    }
    if req.mode == DelegationMode::Single && req.subtasks.len() != 1 {
        return Err(DelegationError::InvalidRequest(format!(
            "single delegation takes exactly one subtask, got {}",
            req.subtasks.len()
        )));
    }
    let lineage = ctx.lineage(&req.requester);
    let spawned: Vec<(AgentId, AgentConfig, BackendHandle)> = {
        let mut reg = ctx.lock();
        let parent = reg
            .nodes
            .get(&req.requester)
            .ok_or_else(|| DelegationError::Unavailable(req.requester.clone(), "unknown agent".into()))?;
        if parent.state != NodeState::Running {
            return Err(DelegationError::Unavailable(req.requester.clone(), "not running".into()));
        }
        let depth = parent.depth + 1;
        if depth > ctx.budget.max_depth() {
            reg.depth_exceeded += 1;
            reg.event(
                &req.requester,
                EventKind::DepthExceeded,
                json!({"requested_depth": depth, "max_depth": ctx.budget.max_depth()}),
            );
            return Err(DelegationError::DepthExceeded {
                requester: req.requester.clone(),
                depth,
                max_depth: ctx.budget.max_depth(),
            });
        }
        let mut siblings: Vec<TaskSpec> = parent
            .children
            .iter()
            .filter_map(|c| reg.nodes.get(c).map(|n| n.task.clone()))
            .collect();
        for t in &req.subtasks {
            enforce_growth_blueprint(&lineage, t)?;
            check_isolation(t, &siblings)?;
            siblings.push(t.clone());
        }
        let mut out = Vec::with_capacity(req.subtasks.len());
        for t in &req.subtasks {
            let mut t = t.clone();
            t.origin = req.requester.to_string();
            match ctx.spawn_locked(&mut reg, Some(&req.requester), t) {
                Ok(s) => out.push(s),
                Err(EngineError::Sealed) => {
                    return Err(DelegationError::Unavailable(req.requester.clone(), "run is sealed".into()))
                }
                Err(e) => return Err(DelegationError::InvalidRequest(e.to_string())),
            }
        }
        let ids: Vec<String> = out.iter().map(|(id, _, _)| id.to_string()).collect();
        reg.event(&req.requester, EventKind::DelegateStart, json!({"mode": req.mode, "children": ids}));
        out
    };

    let n = spawned.len();
    let results: Vec<(AgentId, ChildResult)> = if ctx.setup.options.single_threaded || n == 1 {
        spawned
            .into_iter()
            .map(|(id, cfg, h)| {
                let r = run_agent(ctx, &id, cfg, h);
                (id, r)
            })
            .collect()
    } else {
        let workers = n.min(ctx.budget.max_parallel_children() as usize);
        let queue: Vec<Mutex<Option<(AgentId, AgentConfig, BackendHandle)>>> =
            spawned.into_iter().map(|s| Mutex::new(Some(s))).collect();
        let slots: Vec<Mutex<Option<(AgentId, ChildResult)>>> = (0..n).map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let (id, cfg, h) = queue[i].lock().unwrap().take().expect("each slot taken once");
                    let r = run_agent(ctx, &id, cfg, h);
                    *slots[i].lock().unwrap() = Some((id, r));
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every child ran"))
            .collect()
    };

    let mut reg = ctx.lock();
    for (id, r) in &results {
        reg.event(
            &req.requester,
            EventKind::ChildResult,
            json!({"child": id.to_string(), "status": r.status}),
        );
    }
    reg.event(&req.requester, EventKind::DelegateEnd, json!({"children": n}));
    Ok(results)
}
