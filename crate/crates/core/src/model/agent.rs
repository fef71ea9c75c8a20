//! Agent identity, configuration, budgets and tree nodes.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ModelError, ObjectKind, ObjectRef, ReportPayload};

/// Agent types coincide with the object kinds they are anchored to.
pub type AgentType = ObjectKind;

/// Hierarchical agent identifier: the root is `0`, its children `0.0`,
/// `0.1`, and so on. Assigned at spawn from the parent's child counter, so
/// identifiers do not depend on thread scheduling.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId(Vec<u32>);

impl AgentId {
    pub fn root() -> Self {
        AgentId(vec![0])
    }

    pub fn child(&self, index: u32) -> Self {
        let mut p = self.0.clone();
        p.push(index);
        AgentId(p)
    }

    pub fn depth(&self) -> usize {
        self.0.len() - 1
    }

    pub fn parent(&self) -> Option<AgentId> {
        (self.0.len() > 1).then(|| AgentId(self.0[..self.0.len() - 1].to_vec()))
    }

    pub fn is_ancestor_of(&self, other: &AgentId) -> bool {
        other.0.len() > self.0.len() && other.0.starts_with(&self.0)
    }

    pub fn segments(&self) -> &[u32] {
        &self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        f.write_str(&parts.join("."))
    }
}

impl FromStr for AgentId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let segs: Result<Vec<u32>, _> = s.split('.').map(str::parse).collect();
        match segs {
            Ok(v) if !v.is_empty() && v[0] == 0 => Ok(AgentId(v)),
            _ => Err(ModelError::InvalidAgentId(s.to_string())),
        }
    }
}

impl Serialize for AgentId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AgentId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An `(object, goal)` pair plus the identity of whoever delegated it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub object: ObjectRef,
    pub goal: String,
    pub origin: String,
}

impl TaskSpec {
    pub fn new(object: ObjectRef, goal: impl Into<String>, origin: impl Into<String>) -> Result<Self, ModelError> {
        let goal = goal.into();
        if goal.trim().is_empty() {
            return Err(ModelError::EmptyGoal);
        }
        object.validate()?;
        Ok(Self {
            object,
            goal: goal.trim().to_string(),
            origin: origin.into(),
        })
    }

    /// Equality key for task isolation: normalized object plus exact goal.
    pub fn isolation_key(&self) -> (String, String) {
        let obj = self.object.renormalized().unwrap_or_else(|_| self.object.clone());
        (format!("{}|{}", obj.kind, obj.key()), self.goal.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// Tools an agent can be equipped with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ToolId {
    GetContext,
    ShellExecute,
    BinaryAnalysis,
    Delegation,
    ParallelDelegation,
    Store,
    Query,
    Explore,
}

impl ToolId {
    pub const ALL: [ToolId; 8] = [
        ToolId::GetContext,
        ToolId::ShellExecute,
        ToolId::BinaryAnalysis,
        ToolId::Delegation,
        ToolId::ParallelDelegation,
        ToolId::Store,
        ToolId::Query,
        ToolId::Explore,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolId::GetContext => "GetContext",
            ToolId::ShellExecute => "ShellExecute",
            ToolId::BinaryAnalysis => "BinaryAnalysis",
            ToolId::Delegation => "Delegation",
            ToolId::ParallelDelegation => "ParallelDelegation",
            ToolId::Store => "Store",
            ToolId::Query => "Query",
            ToolId::Explore => "Explore",
        }
    }

    pub fn is_hub(self) -> bool {
        matches!(self, ToolId::Store | ToolId::Query | ToolId::Explore)
    }

    pub fn is_delegation(self) -> bool {
        matches!(self, ToolId::Delegation | ToolId::ParallelDelegation)
    }
}

impl fmt::Display for ToolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToolId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("radare2") || t.eq_ignore_ascii_case("radare2tool") {
            return Ok(ToolId::BinaryAnalysis);
        }
        ToolId::ALL
            .into_iter()
            .find(|id| {
                t.eq_ignore_ascii_case(id.as_str())
                    || t.strip_suffix("Tool").is_some_and(|b| b.eq_ignore_ascii_case(id.as_str()))
            })
            .ok_or_else(|| ModelError::UnknownTool(s.to_string()))
    }
}

/// Run-wide resource limits. Constructed once and never mutated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BudgetFields", into = "BudgetFields")]
pub struct Budget {
    max_steps_per_agent: u32,
    max_depth: u32,
    max_parallel_children: u32,
    max_llm_retries: u32,
    wall_clock_limit: Option<Duration>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct BudgetFields {
    max_steps_per_agent: u32,
    max_depth: u32,
    max_parallel_children: u32,
    max_llm_retries: u32,
    wall_clock_limit_secs: Option<u64>,
}

impl Default for BudgetFields {
    fn default() -> Self {
        Budget::default().into()
    }
}

impl TryFrom<BudgetFields> for Budget {
    type Error = ModelError;

    fn try_from(f: BudgetFields) -> Result<Self, Self::Error> {
        let b = Budget::new(f.max_steps_per_agent, f.max_depth, f.max_parallel_children, f.max_llm_retries)?;
        Ok(match f.wall_clock_limit_secs {
            Some(s) => b.with_wall_clock(Duration::from_secs(s))?,
            None => b,
        })
    }
}

impl From<Budget> for BudgetFields {
    fn from(b: Budget) -> Self {
        BudgetFields {
            max_steps_per_agent: b.max_steps_per_agent,
            max_depth: b.max_depth,
            max_parallel_children: b.max_parallel_children,
            max_llm_retries: b.max_llm_retries,
            wall_clock_limit_secs: b.wall_clock_limit.map(|d| d.as_secs()),
        }
    }
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_steps_per_agent: 30,
            max_depth: 4,
            max_parallel_children: 8,
            max_llm_retries: 3,
            wall_clock_limit: None,
        }
    }
}

impl Budget {
    pub fn new(
        max_steps_per_agent: u32,
        max_depth: u32,
        max_parallel_children: u32,
        max_llm_retries: u32,
    ) -> Result<Self, ModelError> {
        for (name, v) in [
            ("max_steps_per_agent", max_steps_per_agent),
            ("max_depth", max_depth),
            ("max_parallel_children", max_parallel_children),
            ("max_llm_retries", max_llm_retries),
        ] {
            if v < 1 {
                return Err(ModelError::InvalidBudget(name));
            }
        }
        Ok(Budget {
            max_steps_per_agent,
            max_depth,
            max_parallel_children,
            max_llm_retries,
            wall_clock_limit: None,
        })
    }

    pub fn with_wall_clock(mut self, limit: Duration) -> Result<Self, ModelError> {
        if limit.is_zero() {
            return Err(ModelError::InvalidBudget("wall_clock_limit"));
        }
        self.wall_clock_limit = Some(limit);
        Ok(self)
    }

    pub fn max_steps_per_agent(&self) -> u32 {
        self.max_steps_per_agent
    }
    pub fn max_depth(&self) -> u32 {
        self.max_depth
    }
    pub fn max_parallel_children(&self) -> u32 {
        self.max_parallel_children
    }
    pub fn max_llm_retries(&self) -> u32 {
        self.max_llm_retries
    }
    pub fn wall_clock_limit(&self) -> Option<Duration> {
        self.wall_clock_limit
    }
}

/// The six-field instantiation record for an agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub llm: String,
    pub output_schema: String,
    pub memory: Vec<Message>,
    pub task: TaskSpec,
    #[serde(rename = "type")]
    pub agent_type: AgentType,
    pub tool: Vec<ToolId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeState {
    Running,
    Completed,
    BudgetExhausted,
    Failed,
}

impl NodeState {
    pub fn is_terminal(self) -> bool {
        self != NodeState::Running
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultStatus {
    Success,
    Partial,
    Failed,
}

/// What a child hands back to its parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildResult {
    pub status: ResultStatus,
    pub payload: ReportPayload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

impl ChildResult {
    pub fn success(payload: ReportPayload) -> Self {
        Self {
            status: ResultStatus::Success,
            payload,
            explanation: None,
        }
    }

    pub fn partial(payload: ReportPayload, why: impl Into<String>) -> Self {
        Self {
            status: ResultStatus::Partial,
            payload,
            explanation: Some(why.into()),
        }
    }

    pub fn failed(agent_type: AgentType, why: impl Into<String>) -> Self {
        Self {
            status: ResultStatus::Failed,
            payload: ReportPayload::empty(agent_type),
            explanation: Some(why.into()),
        }
    }

    /// Shape check: payload matches the child type and non-success carries an
    /// explanation.
    pub fn is_well_formed(&self, agent_type: AgentType) -> bool {
        self.payload.agent_type() == agent_type
            && (self.status == ResultStatus::Success
                || self.explanation.as_deref().is_some_and(|e| !e.trim().is_empty()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub calls: u64,
}

/// One agent in the tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToANode {
    pub agent_id: AgentId,
    pub parent_id: Option<AgentId>,
    pub agent_type: AgentType,
    pub task: TaskSpec,
    pub depth: u32,
    pub state: NodeState,
    pub steps_used: u32,
    pub children: Vec<AgentId>,
    pub result: Option<ChildResult>,
    #[serde(default)]
    pub tokens: TokenUsage,
}

impl ToANode {
    /// Moves the node into a terminal state. Terminal states are final.
    pub fn transition(&mut self, to: NodeState) -> Result<(), ModelError> {
        if self.state.is_terminal() || !to.is_terminal() {
            return Err(ModelError::IllegalTransition { from: self.state, to });
        }
        self.state = to;
        Ok(())
    }
}
