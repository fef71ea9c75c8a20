use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::Registry;
use crate::model::{AgentId, ToANode, TokenUsage};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub agent_count: u32,
    pub max_depth: u32,
    /// Largest child count of any node.
    pub max_branch: u32,
    /// Reasoning steps summed over all agents.
    pub total_steps: u64,
    /// Steps taken by agents that delegated nothing.
    pub leaf_steps: u64,
    /// Steps taken by agents with children.
    pub integration_steps: u64,
    pub files_accessed: u32,
    pub tool_calls: u64,
    pub depth_exceeded: u32,
    pub alerts: u32,
    pub llm_calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub wall_time_ms: u64,
}

impl RunMetrics {
    pub(crate) fn from_registry(reg: &Registry, usage: TokenUsage, elapsed: Duration) -> Self {
        let (leaf, integration) = split_steps(&reg.nodes);
        RunMetrics {
            agent_count: reg.nodes.len() as u32,
            max_depth: reg.max_depth,
            max_branch: reg.max_branch,
            total_steps: reg.total_steps,
            leaf_steps: leaf,
            integration_steps: integration,
            files_accessed: reg.files.len() as u32,
            tool_calls: reg.tools_used.values().flat_map(|m| m.values()).map(|&n| n as u64).sum(),
            depth_exceeded: reg.depth_exceeded,
            alerts: reg.alerts.len() as u32,
            llm_calls: usage.calls,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            wall_time_ms: elapsed.as_millis() as u64,
        }
    }

    /// Recomputes the tree-shape fields from a node table alone. Used to
    /// cross-check the incrementally maintained values.
    pub fn recompute_shape(nodes: &BTreeMap<AgentId, ToANode>) -> (u32, u32, u32, u64) {
        let agent_count = nodes.len() as u32;
        let max_depth = nodes.values().map(|n| n.depth).max().unwrap_or(0);
        let max_branch = nodes.values().map(|n| n.children.len() as u32).max().unwrap_or(0);
        let steps = nodes.values().map(|n| n.steps_used as u64).sum();
        (agent_count, max_depth, max_branch, steps)
    }
}

fn split_steps(nodes: &BTreeMap<AgentId, ToANode>) -> (u64, u64) {
    nodes.values().fold((0, 0), |(leaf, int), n| {
        if n.children.is_empty() {
            (leaf + n.steps_used as u64, int)
        } else {
            (leaf, int + n.steps_used as u64)
        }
    })
}
